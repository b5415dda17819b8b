#!/usr/bin/env python3
"""Development server runner for the DDS / monitor / agent HTTP front."""
import os

import uvicorn

if __name__ == "__main__":
    uvicorn.run(
        "app.main:app",
        host=os.getenv("ANTDT_HOST", "0.0.0.0"),
        port=int(os.getenv("ANTDT_PORT", "8000")),
        reload=True
    )
