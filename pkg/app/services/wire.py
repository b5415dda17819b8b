"""
Length-prefixed JSON framing: a 4-byte big-endian length followed by a UTF-8
JSON body. Used by the TCP front of the dds, monitor and agent services.
"""
import asyncio
import json
import logging
import struct
from typing import Callable

from app.errors import ProtocolError, StragglerError

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024


def encode_frame(message: dict) -> bytes:
    body = json.dumps(message, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> dict:
    try:
        message = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from exc
    if not isinstance(message, dict):
        raise ProtocolError("frame body must be a JSON object")
    return message


async def read_frame(reader: asyncio.StreamReader) -> dict:
    header = await reader.readexactly(HEADER.size)
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    return decode_body(await reader.readexactly(length))


def dispatch(handler: Callable[[dict], dict], message: dict) -> dict:
    """Run one request; domain errors become {"error": ...} replies."""
    try:
        return handler(message)
    except StragglerError as exc:
        return {"error": str(exc), "type": type(exc).__name__}
    except (KeyError, ValueError, TypeError) as exc:
        return {"error": f"bad request: {exc}", "type": "ProtocolError"}


async def serve(handler: Callable[[dict], dict], host: str = "127.0.0.1", port: int = 7070):
    """Serve framed requests until cancelled; the handler sees one request at a time."""
    lock = asyncio.Lock()

    async def on_client(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        peer = writer.get_extra_info("peername")
        try:
            while True:
                try:
                    message = await read_frame(reader)
                except asyncio.IncompleteReadError:
                    break
                except ProtocolError as exc:
                    writer.write(encode_frame({"error": str(exc), "type": "ProtocolError"}))
                    await writer.drain()
                    break
                async with lock:
                    reply = dispatch(handler, message)
                writer.write(encode_frame(reply))
                await writer.drain()
        finally:
            logger.debug("client closed peer=%s", peer)
            writer.close()

    server = await asyncio.start_server(on_client, host, port)
    logger.info("listening on %s:%d", host, port)
    async with server:
        await server.serve_forever()
