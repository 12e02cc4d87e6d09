import logging
from pathlib import Path

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

logger = logging.getLogger(__name__)


class HTTPClient:
    """
    HTTP client with retry logic for fetching dataset archives.
    Uses a singleton session for connection pooling.
    """

    _session: requests.Session | None = None

    @classmethod
    def _get_session(cls) -> requests.Session:
        """
        Get or create the singleton session with retry configuration.

        Returns:
            Configured requests.Session instance
        """
        if cls._session is None:
            cls._session = cls._create_session()
        return cls._session

    @classmethod
    def close_session(cls) -> None:
        """Close the singleton session and reset it."""
        if cls._session is not None:
            cls._session.close()
            cls._session = None

    @classmethod
    def _create_session(
        cls, max_retries: int = 3, retry_delay: float = 1.0
    ) -> requests.Session:
        """
        Create a new session with retry configuration.

        Args:
            max_retries: Maximum number of retries
            retry_delay: Backoff factor between retries in seconds

        Returns:
            Configured requests.Session instance
        """
        session = requests.Session()
        retry_strategy = Retry(
            total=max_retries,
            backoff_factor=retry_delay,
            status_forcelist=[429, 500, 502, 503, 504],
            allowed_methods=["GET"],
        )
        adapter = HTTPAdapter(max_retries=retry_strategy)
        session.mount("http://", adapter)
        session.mount("https://", adapter)
        return session

    @staticmethod
    def download(
        url: str,
        dest: Path,
        max_retries: int = 3,
        retry_delay: float = 1.0,
        timeout: int = 60,
        chunk_size: int = 1 << 20,
    ) -> Path:
        """
        Stream ``url`` to ``dest``.

        The body is written to a ``.part`` sibling first and renamed once
        complete, so an interrupted download never leaves a plausible file.

        Args:
            url: The URL to fetch
            dest: Destination file path
            max_retries: Maximum number of retries (only used if a new session
                is needed)
            retry_delay: Backoff factor (only used if session needs recreation)
            timeout: Request timeout in seconds
            chunk_size: Bytes per streamed chunk

        Returns:
            The destination path

        Raises:
            requests.HTTPError: If the request fails after retries
        """
        dest = Path(dest)
        dest.parent.mkdir(parents=True, exist_ok=True)
        partial = dest.with_name(dest.name + ".part")

        # If custom retry parameters are provided, use a temporary session
        temporary = max_retries != 3 or retry_delay != 1.0
        if temporary:
            session = HTTPClient._create_session(max_retries, retry_delay)
        else:
            session = HTTPClient._get_session()

        logger.info("Downloading %s", url)
        try:
            with session.get(url, stream=True, timeout=timeout) as response:
                response.raise_for_status()
                with partial.open("wb") as handle:
                    for chunk in response.iter_content(chunk_size=chunk_size):
                        if chunk:
                            handle.write(chunk)
        finally:
            if temporary:
                session.close()
        partial.replace(dest)
        logger.info("Saved %s (%d bytes)", dest, dest.stat().st_size)
        return dest
