"""HTTP surface of the project server.

JSON bodies everywhere; blob downloads honor standard byte-range headers and
carry both the whole-blob digest (X-Content-Digest) and the digest of the
returned bytes (X-Chunk-Digest) so clients can verify each range end to end.
"""

from __future__ import annotations

import hashlib
import re
from urllib.parse import unquote

from .httpglue import HttpService, JsonRequestHandler
from .errors import BadRange
from .protocol import AttachmentRequest, ResultReport, WorkUnit, unb64
from .server import ServerCore


def _parse_range(header: str, size: int) -> tuple[int, int]:
    match = re.fullmatch(r"bytes=(\d+)-(\d*)", header.strip())
    if match is None:
        raise BadRange(f"unsupported Range header {header!r}")
    start = int(match.group(1))
    end = int(match.group(2)) + 1 if match.group(2) else size
    return start, end


def make_handler(core: ServerCore):
    def attach(handler, match, body):
        req = AttachmentRequest.from_wire(body)
        host_id, image = core.handle_attach(req, source=handler.client_address[0])
        return {"host_id": host_id, "image": image.to_wire()}

    def depdisk(handler, match, body):
        project_url = unquote(match.group(1))
        dep = core.probe_dependencies(project_url, source=handler.client_address[0])
        return dep.to_wire()

    def blob(handler, match, body):
        blob_id = match.group(1)
        size = core.blob_size(blob_id)
        range_header = handler.headers.get("Range")
        if range_header:
            start, end = _parse_range(range_header, size)
            payload = core.serve_blob(blob_id, start, end,
                                      source=handler.client_address[0])
            status = 206
            headers = {"Content-Range": f"bytes {start}-{end - 1}/{size}"}
        else:
            payload = core.serve_blob(blob_id, source=handler.client_address[0])
            status = 200
            headers = {}
        headers["Content-Type"] = "application/octet-stream"
        headers["X-Content-Digest"] = core.blob_digest(blob_id)
        headers["X-Chunk-Digest"] = hashlib.sha256(payload).hexdigest()
        headers["Accept-Ranges"] = "bytes"
        return status, headers, payload

    def work_fetch(handler, match, body):
        units = core.dispatch_work(body["host_id"], int(body.get("slots", 1)),
                                   source=body.get("source", ""))
        return {"units": [u.to_wire() for u in units]}

    def work_result(handler, match, body):
        report = ResultReport.from_wire(body["report"])
        verdict = core.receive_result(body["host_id"], report,
                                      source=body.get("source", ""))
        return verdict

    def post_error(handler, match, body):
        core.record_error(body["host_id"], body.get("error_id", ""),
                          body.get("text", ""), source=body.get("source", ""))
        return {"status": "logged"}

    def stats(handler, match, body):
        window = float(match.group(1)) if match.group(1) else 60.0
        return core.throughput_stats(window)

    def admin_project(handler, match, body):
        record = core.register_project(
            body["project_url"],
            image_package=unb64(body["image_package"]),
            image_uncompressed=int(body["image_uncompressed"]),
            script=unb64(body["script"]),
            depdisk_package=(unb64(body["depdisk_package"])
                             if body.get("depdisk_package") else None),
            validation_mode=body.get("validation_mode", "recompute"),
        )
        return {"image": record.image.to_wire(), "dep_disk": record.dep_disk.to_wire()}

    def admin_key(handler, match, body):
        core.register_key(body["key"])
        return {"status": "registered"}

    def admin_work(handler, match, body):
        core.add_work(body["project_url"], WorkUnit.from_wire(body["unit"]))
        return {"status": "queued"}

    class Handler(JsonRequestHandler):
        routes = [
            ("POST", re.compile(r"^/attach$"), attach),
            ("GET", re.compile(r"^/projects/([^/]+)/depdisk$"), depdisk),
            ("GET", re.compile(r"^/blobs/([^/?]+)$"), blob),
            ("POST", re.compile(r"^/work/fetch$"), work_fetch),
            ("POST", re.compile(r"^/work/result$"), work_result),
            ("POST", re.compile(r"^/errors$"), post_error),
            ("GET", re.compile(r"^/stats(?:\?window=([0-9.]+))?$"), stats),
            ("POST", re.compile(r"^/admin/projects$"), admin_project),
            ("POST", re.compile(r"^/admin/keys$"), admin_key),
            ("POST", re.compile(r"^/admin/work$"), admin_work),
        ]

    return Handler


def serve(core: ServerCore, host: str = "127.0.0.1", port: int = 0) -> HttpService:
    return HttpService(make_handler(core), host, port).start()
