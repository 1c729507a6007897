"""
Fetch hook for routing-graph bundles and anomaly feeds
"""

import io
import logging
from pathlib import Path
from typing import BinaryIO, Callable, Union

import requests

from .errors import FetchError

logger = logging.getLogger(__name__)

Location = Union[str, Path]
FetchHook = Callable[[Location], bytes]


class FeedFetcher:
    """Retrieves inputs from local files or HTTP(S) URLs"""

    def __init__(self, timeout: float = 30.0, session: requests.Session = None):
        self.timeout = timeout
        self.session = session or requests.Session()
        self.headers = {"Accept": "application/json, text/plain, */*"}

    def _make_request(self, url: str) -> bytes:
        """Download a URL, raising FetchError on any transport problem"""
        try:
            response = self.session.get(url, headers=self.headers, timeout=self.timeout)
            response.raise_for_status()
            return response.content
        except requests.exceptions.RequestException as e:
            logger.warning("fetch of %s failed: %s", url, e)
            raise FetchError(f"Failed to fetch {url}: {e}") from e

    def __call__(self, location: Location) -> bytes:
        return self.fetch(location)

    def fetch(self, location: Location) -> bytes:
        """Return the raw bytes behind a path or URL"""
        text = str(location)
        if text.startswith(("http://", "https://")):
            data = self._make_request(text)
        else:
            path = Path(text)
            if not path.is_file():
                raise FetchError(f"File not found: {text}")
            try:
                data = path.read_bytes()
            except OSError as e:
                raise FetchError(f"Failed to read {text}: {e}") from e
        logger.info("fetched %s (%d bytes)", text, len(data))
        return data

    def open(self, location: Location) -> BinaryIO:
        """Fetch a location and wrap it as a binary stream"""
        return io.BytesIO(self.fetch(location))


default_fetcher = FeedFetcher()
