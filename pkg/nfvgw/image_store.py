"""
Central VNF image store of the gateway provider and the per-domain image caches.
"""

import hashlib
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple, Union

import orjson
import structlog

from .errors import DuplicateVersion, IntegrityError, NotFound, NotVwsnDomain
from .types import AnyObject, DomainId, VNFDescriptor, VNFType
from .utils import safe_json_parse

logger = structlog.get_logger(__name__)

INDEX_FILE = "index.json"
IMAGES_DIR = "images"


@dataclass(frozen=True)
class VNFImage:
    image_id: str
    vnf_type: VNFType
    version: int
    size_bytes: int
    digest: bytes  # sha256 of the content

    def to_dict(self) -> AnyObject:
        return {
            "image_id": self.image_id,
            "vnf_type": self.vnf_type.value,
            "version": self.version,
            "size_bytes": self.size_bytes,
            "digest": self.digest.hex(),
        }

    @classmethod
    def from_dict(cls, data: AnyObject) -> "VNFImage":
        return cls(
            image_id=data["image_id"],
            vnf_type=VNFType(data["vnf_type"]),
            version=int(data["version"]),
            size_bytes=int(data["size_bytes"]),
            digest=bytes.fromhex(data["digest"]),
        )


def build_manifest(descriptor: VNFDescriptor) -> bytes:
    """Image content for a descriptor: its manifest as canonical JSON."""
    return orjson.dumps(descriptor.to_dict(), option=orjson.OPT_SORT_KEYS)


class ImageStore:
    """
    Content-addressed image registry.

    Layout on disk is ``<root>/images/<image_id>`` plus ``<root>/index.json``; the image id
    is the hex sha256 of the content, so it is stable across restarts. Access is confined to
    one event loop. One process publishes; the domain processes of a split run open the
    same root afterwards and only read.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self._images_dir = self.root / IMAGES_DIR
        self._images_dir.mkdir(parents=True, exist_ok=True)
        self._images: Dict[str, VNFImage] = {}
        self._by_version: Dict[Tuple[VNFType, int], str] = {}
        self._load_index()

    def _load_index(self) -> None:
        index_path = self.root / INDEX_FILE
        if not index_path.exists():
            return
        entries = safe_json_parse(index_path.read_bytes(), default=[], silent=False)
        for entry in entries:
            image = VNFImage.from_dict(entry)
            self._images[image.image_id] = image
            self._by_version[(image.vnf_type, image.version)] = image.image_id
        logger.debug("Loaded image index", root=str(self.root), images=len(self._images))

    def _write_index(self) -> None:
        entries = [image.to_dict() for image in sorted(self._images.values(), key=_sort_key)]
        index_path = self.root / INDEX_FILE
        tmp_path = index_path.with_suffix(".tmp")
        tmp_path.write_bytes(orjson.dumps(entries, option=orjson.OPT_INDENT_2))
        os.replace(tmp_path, index_path)

    def publish_image(self, vnf_type: VNFType, version: int, content: bytes) -> str:
        if not content:
            raise ValueError("image content must not be empty")
        digest = hashlib.sha256(content).digest()
        image_id = digest.hex()

        if (vnf_type, version) in self._by_version:
            raise DuplicateVersion(f"{vnf_type.value} v{version} is already published")
        if image_id in self._images:
            existing = self._images[image_id]
            raise ValueError(
                f"Content is already published as {existing.vnf_type.value} v{existing.version}"
            )

        blob_path = self._images_dir / image_id
        tmp_path = blob_path.with_suffix(".tmp")
        tmp_path.write_bytes(content)
        os.replace(tmp_path, blob_path)

        image = VNFImage(image_id, vnf_type, version, len(content), digest)
        self._images[image_id] = image
        self._by_version[(vnf_type, version)] = image_id
        self._write_index()

        logger.info(
            "Published VNF image",
            image_id=image_id[:12],
            vnf_type=vnf_type.value,
            version=version,
        )
        return image_id

    def fetch_image(self, image_id: str) -> Tuple[VNFImage, bytes]:
        image = self._images.get(image_id)
        if image is None:
            raise NotFound(f"Image {image_id} is not published")
        blob_path = self._images_dir / image_id
        try:
            content = blob_path.read_bytes()
        except FileNotFoundError as exc:
            raise IntegrityError(f"Image {image_id} is indexed but its blob is missing") from exc
        if len(content) != image.size_bytes or hashlib.sha256(content).digest() != image.digest:
            raise IntegrityError(f"Image {image_id} does not match its digest")
        return image, content

    def lookup(self, vnf_type: VNFType, version: int) -> Optional[VNFImage]:
        image_id = self._by_version.get((vnf_type, version))
        return self._images[image_id] if image_id is not None else None

    def has_image(self, image_id: str) -> bool:
        return image_id in self._images

    def get(self, image_id: str) -> Optional[VNFImage]:
        return self._images.get(image_id)

    def list_images(self) -> List[VNFImage]:
        return sorted(self._images.values(), key=_sort_key)


def _sort_key(image: VNFImage) -> Tuple[str, int]:
    return (image.vnf_type.value, image.version)


class CacheResult(str, Enum):
    HIT = "hit"
    MISS = "miss"


class ImageCaches:
    """Image caches of the VWSN provider domains. Entries are never evicted."""

    def __init__(self, store: ImageStore):
        self.store = store
        self._entries: Dict[DomainId, Set[str]] = {
            domain: set() for domain in DomainId if domain.is_vwsn
        }

    def _domain_entries(self, domain: DomainId) -> Set[str]:
        if not domain.is_vwsn:
            raise NotVwsnDomain(f"{domain.value} has no image cache")
        return self._entries[domain]

    def cache_check(self, domain: DomainId, image_id: str) -> CacheResult:
        entries = self._domain_entries(domain)
        return CacheResult.HIT if image_id in entries else CacheResult.MISS

    def cache_insert(self, domain: DomainId, image_id: str) -> None:
        entries = self._domain_entries(domain)
        if not self.store.has_image(image_id):
            raise NotFound(f"Image {image_id} is not in the central store")
        entries.add(image_id)

    def entries(self, domain: DomainId) -> Set[str]:
        return set(self._domain_entries(domain))
