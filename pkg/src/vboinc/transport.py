"""Client-side server transports.

The daemon is written against this small call surface; the HTTP transport
binds it to a real project server, while the simulation harness supplies an
in-memory transport with modeled link timing (see vboinc.sim).  Connectivity
problems raise ConnectFailure so retry loops can back off; domain errors
re-raise as their typed exceptions.
"""

from __future__ import annotations

import hashlib
from typing import Optional

import requests

from .errors import ConnectFailure, TransportError
from .httpglue import raise_for_error_doc
from .protocol import (AttachmentRequest, DepDiskDescriptor, ImageDescriptor,
                       ResultReport, WorkUnit)


class Transport:
    """Call surface shared by all transports."""

    def attach(self, req: AttachmentRequest) -> tuple[str, ImageDescriptor]:
        raise NotImplementedError

    def probe_dependencies(self, project_url: str) -> DepDiskDescriptor:
        raise NotImplementedError

    def blob_info(self, blob_id: str) -> tuple[int, str]:
        """(total bytes, whole-blob sha-256)."""
        raise NotImplementedError

    def fetch_range(self, blob_id: str, start: int, end: int) -> tuple[bytes, str]:
        """(payload as received, digest of the payload as sent).  A transit
        corruption shows up as a digest mismatch for the caller to retry."""
        raise NotImplementedError

    def fetch_work(self, host_id: str, slots: int) -> list[WorkUnit]:
        raise NotImplementedError

    def post_result(self, host_id: str, report: ResultReport) -> dict:
        raise NotImplementedError

    def post_error(self, host_id: str, error_id: str, text: str) -> None:
        raise NotImplementedError

    def stats(self, window: float = 60.0) -> dict:
        raise NotImplementedError


def server_base(project_url: str) -> str:
    """The HTTP endpoint root for a project URL: its scheme and authority.
    Project identity keeps the full URL; requests go to the service root."""
    from urllib.parse import urlparse
    parsed = urlparse(project_url)
    return f"{parsed.scheme}://{parsed.netloc}"


class HttpTransport(Transport):
    def __init__(self, base_url: str, timeout: float = 10.0,
                 source: str = ""):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.source = source
        self._session = requests.Session()

    # -- plumbing -----------------------------------------------------------

    def _request(self, method: str, path: str, json_body: Optional[dict] = None,
                 headers: Optional[dict] = None) -> requests.Response:
        try:
            response = self._session.request(
                method, self.base_url + path, json=json_body, headers=headers,
                timeout=self.timeout)
        except requests.exceptions.RequestException as exc:
            raise ConnectFailure(f"{method} {path}: {exc}") from exc
        if response.status_code >= 400:
            try:
                raise_for_error_doc(response.json())
            except ValueError:
                raise TransportError(
                    f"{method} {path}: HTTP {response.status_code}") from None
        return response

    # -- transport surface ------------------------------------------------------

    def attach(self, req: AttachmentRequest) -> tuple[str, ImageDescriptor]:
        doc = self._request("POST", "/attach", req.to_wire()).json()
        return doc["host_id"], ImageDescriptor.from_wire(doc["image"])

    def probe_dependencies(self, project_url: str) -> DepDiskDescriptor:
        from urllib.parse import quote
        doc = self._request(
            "GET", f"/projects/{quote(project_url, safe='')}/depdisk").json()
        return DepDiskDescriptor.from_wire(doc)

    def blob_info(self, blob_id: str) -> tuple[int, str]:
        response = self._request("HEAD", f"/blobs/{blob_id}")
        return (int(response.headers["Content-Length"]),
                response.headers["X-Content-Digest"])

    def fetch_range(self, blob_id: str, start: int, end: int) -> tuple[bytes, str]:
        response = self._request("GET", f"/blobs/{blob_id}",
                                 headers={"Range": f"bytes={start}-{end - 1}"})
        sent_digest = response.headers.get(
            "X-Chunk-Digest", hashlib.sha256(response.content).hexdigest())
        return response.content, sent_digest

    def fetch_work(self, host_id: str, slots: int) -> list[WorkUnit]:
        doc = self._request("POST", "/work/fetch",
                            {"host_id": host_id, "slots": slots,
                             "source": self.source}).json()
        return [WorkUnit.from_wire(u) for u in doc["units"]]

    def post_result(self, host_id: str, report: ResultReport) -> dict:
        return self._request("POST", "/work/result",
                             {"host_id": host_id, "report": report.to_wire(),
                              "source": self.source}).json()

    def post_error(self, host_id: str, error_id: str, text: str) -> None:
        self._request("POST", "/errors",
                      {"host_id": host_id, "error_id": error_id, "text": text,
                       "source": self.source})

    def stats(self, window: float = 60.0) -> dict:
        return self._request("GET", f"/stats?window={window}").json()
