#!/usr/bin/env python3
"""
MovieLens-1M Download Script

Downloads the MovieLens-1M archive from GroupLens and extracts ratings.dat
into data/ml-1m/, which is where the `movielens` preset looks for it.
Interrupted downloads resume from the .partial file on the next call.

Usage:
    python scripts/fetch_movielens.py
    python scripts/fetch_movielens.py --dest data/ml-1m --force
"""

import argparse
import logging
import os
import sys
import zipfile

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

ML1M_URL = "https://files.grouplens.org/datasets/movielens/ml-1m.zip"
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(SCRIPT_DIR)
DEFAULT_DEST = os.path.join(PROJECT_ROOT, "data", "ml-1m")

logger = logging.getLogger("fetch_movielens")


def _retry_session(retries: int = 3, backoff_factor: float = 0.5) -> requests.Session:
    session = requests.Session()
    retry = Retry(total=retries, backoff_factor=backoff_factor,
                  status_forcelist=(502, 503, 504), allowed_methods={"GET"}, raise_on_status=False)
    session.mount("https://", HTTPAdapter(max_retries=retry))
    return session


def download_file(url: str, filepath: str) -> str:
    """
    Streams `url` to `filepath` in 1MB blocks.

    Data lands in `<filepath>.partial` first and is renamed once complete; an
    existing partial file is resumed with an HTTP Range request.

    Returns:
        str: The final file path.
    """
    temp_filepath = filepath + ".partial"
    headers = {}
    downloaded = 0
    if os.path.exists(temp_filepath):
        downloaded = os.path.getsize(temp_filepath)
        headers["Range"] = f"bytes={downloaded}-"
        logger.info("Resuming from byte %d", downloaded)

    response = _retry_session().get(url, stream=True, headers=headers, timeout=30)
    response.raise_for_status()
    if downloaded and response.status_code != 206:
        # Server ignored the range; start over.
        downloaded = 0

    if "content-range" in response.headers:
        total_size = int(response.headers["content-range"].split("/")[-1])
    else:
        total_size = int(response.headers.get("content-length", 0)) + downloaded

    mode = "ab" if downloaded > 0 else "wb"
    last_pct = -1
    with open(temp_filepath, mode) as f:
        for block in response.iter_content(1024 * 1024):
            downloaded += len(block)
            f.write(block)
            if total_size > 0:
                pct = int(downloaded / total_size * 100)
                if pct // 10 != last_pct // 10:
                    logger.info("%d%% (%d / %d bytes)", pct, downloaded, total_size)
                last_pct = pct

    os.replace(temp_filepath, filepath)
    logger.info("Download complete: %s", filepath)
    return filepath


def extract_ratings(archive: str, dest: str) -> str:
    """Extracts ml-1m/ratings.dat from the archive into `dest`."""
    target = os.path.join(dest, "ratings.dat")
    with zipfile.ZipFile(archive) as zf:
        with zf.open("ml-1m/ratings.dat") as src, open(target, "wb") as out:
            while True:
                chunk = src.read(1024 * 1024)
                if not chunk:
                    break
                out.write(chunk)
    return target


def main() -> int:
    parser = argparse.ArgumentParser(description="Download MovieLens-1M ratings")
    parser.add_argument("--dest", default=DEFAULT_DEST, help="Target directory (default: data/ml-1m)")
    parser.add_argument("--url", default=ML1M_URL, help="Archive URL")
    parser.add_argument("--force", action="store_true", help="Download even if ratings.dat exists")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format='%(asctime)s - [%(levelname)s] - %(message)s')
    os.makedirs(args.dest, exist_ok=True)
    ratings = os.path.join(args.dest, "ratings.dat")
    if os.path.exists(ratings) and not args.force:
        logger.info("ratings.dat already present at %s", ratings)
        return 0

    archive = os.path.join(args.dest, "ml-1m.zip")
    try:
        if args.force or not os.path.exists(archive):
            download_file(args.url, archive)
        path = extract_ratings(archive, args.dest)
    except (requests.RequestException, zipfile.BadZipFile, KeyError, OSError) as e:
        logger.error("Fetching MovieLens-1M failed: %s", e, exc_info=True)
        return 2
    logger.info("Ratings written to %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
