"""
Filesystem object storage with object-store semantics.

Blobs are content addressed (`blobs/{first2}/{sha256}`) and immutable.
Outbound datasets live under `outbound/{env}/{dataset_id}/` and become
visible only through an atomic directory rename.
"""
import logging
import os
import shutil
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

from src.errors import IntegrityError, StorageError
from utils.canonical import sha256_hex

logger = logging.getLogger(__name__)

TEMP_PREFIX = '.tmp-'
TRASH_PREFIX = '.trash-'


def _write_durable(path: Path, content: bytes) -> None:
    with open(path, 'wb') as f:
        f.write(content)
        f.flush()
        os.fsync(f.fileno())


def _fsync_dir(path: Path) -> None:
    dir_fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(dir_fd)
    finally:
        os.close(dir_fd)


@dataclass
class DatasetSwap:
    """A dataset directory renamed into place, with the generation it replaced."""

    final: Path
    trash: Path
    replaced: bool
    object_keys: List[str] = field(default_factory=list)


class BlobStore:
    """Content-addressed, immutable blob storage."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, checksum: str) -> Path:
        return self.root / checksum[:2] / checksum

    def exists(self, checksum: str) -> bool:
        return self._path(checksum).is_file()

    def write(self, content: bytes) -> Tuple[str, bool]:
        """
        Store content under its SHA-256.

        Returns:
            (checksum, created); identical content is never stored twice
        """
        checksum = sha256_hex(content)
        path = self._path(checksum)
        if path.is_file():
            return checksum, False
        tmp = path.parent / f"{TEMP_PREFIX}{checksum}-{uuid.uuid4().hex}"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            _write_durable(tmp, content)
            # Same content → same key, so a concurrent writer's rename is harmless
            os.replace(tmp, path)
        except OSError as e:
            tmp.unlink(missing_ok=True)
            raise StorageError('STORAGE_IO', f"cannot write blob {checksum}: {e}")
        return checksum, True

    def read(self, checksum: str, verify: bool = True) -> bytes:
        """
        Read a blob.

        Raises:
            IntegrityError: CHECKSUM_MISMATCH if the object is gone or its
                bytes no longer hash to the key
        """
        path = self._path(checksum)
        try:
            content = path.read_bytes()
        except FileNotFoundError:
            raise IntegrityError('CHECKSUM_MISMATCH', f"object {checksum} missing from blob store")
        except OSError as e:
            raise StorageError('STORAGE_IO', f"cannot read blob {checksum}: {e}")
        if verify and sha256_hex(content) != checksum:
            raise IntegrityError('CHECKSUM_MISMATCH', f"object {checksum} does not match its checksum")
        return content

    def iter_checksums(self) -> Iterator[str]:
        for shard in sorted(p for p in self.root.iterdir() if p.is_dir()):
            for path in sorted(shard.iterdir()):
                if path.is_file() and not path.name.startswith('.'):
                    yield path.name

    def count(self) -> int:
        return sum(1 for _ in self.iter_checksums())

    def object_path(self, checksum: str) -> Path:
        return self._path(checksum)


class OutboundZone:
    """Per-environment outbound area for published datasets."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def dataset_dir(self, environment: str, dataset_id: str) -> Path:
        return self.root / environment / dataset_id

    def object_key(self, environment: str, dataset_id: str, name: str) -> str:
        return f"outbound/{environment}/{dataset_id}/{name}"

    def swap_in(self, environment: str, dataset_id: str, files: Dict[str, bytes]) -> DatasetSwap:
        """
        Rename a freshly written dataset directory into place.

        Content is written and fsynced into a hidden temporary directory that
        is renamed into place; readers never see a partial dataset. The
        replaced generation is parked until `finish` drops it or `undo`
        brings it back.
        """
        env_dir = self.root / environment
        final = env_dir / dataset_id
        token = uuid.uuid4().hex
        tmp = env_dir / f"{TEMP_PREFIX}{dataset_id}-{token}"
        trash = env_dir / f"{TRASH_PREFIX}{dataset_id}-{token}"
        replaced = False
        try:
            tmp.mkdir(parents=True)
            for name in sorted(files):
                _write_durable(tmp / name, files[name])
            if final.exists():
                os.replace(final, trash)
                replaced = True
            os.replace(tmp, final)
            _fsync_dir(env_dir)
        except OSError as e:
            shutil.rmtree(tmp, ignore_errors=True)
            if trash.exists() and not final.exists():
                os.replace(trash, final)
            raise StorageError('STORAGE_IO', f"cannot publish {environment}/{dataset_id}: {e}")
        keys = [self.object_key(environment, dataset_id, name) for name in sorted(files)]
        return DatasetSwap(final=final, trash=trash, replaced=replaced, object_keys=keys)

    @staticmethod
    def finish(swap: DatasetSwap) -> None:
        shutil.rmtree(swap.trash, ignore_errors=True)

    def undo(self, swap: DatasetSwap) -> None:
        """Put the previous generation (or nothing) back in place."""
        try:
            shutil.rmtree(swap.final)
            if swap.replaced:
                os.replace(swap.trash, swap.final)
            _fsync_dir(swap.final.parent)
        except OSError as e:
            # audit(repair=True) restores a parked generation whose dataset directory is gone
            logger.error(f"Could not roll back outbound {swap.final.parent.name}/{swap.final.name}: {e}")

    def read(self, environment: str, dataset_id: str, name: str) -> bytes:
        path = self.dataset_dir(environment, dataset_id) / name
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise IntegrityError('CHECKSUM_MISMATCH', f"outbound object {environment}/{dataset_id}/{name} missing")
        except OSError as e:
            raise StorageError('STORAGE_IO', f"cannot read {path}: {e}")

    def path_for_key(self, object_key: str) -> Path:
        prefix = 'outbound/'
        if not object_key.startswith(prefix):
            raise ValueError(f"not an outbound key: {object_key}")
        return self.root / object_key[len(prefix):]

    def leftovers(self) -> List[Path]:
        """Temporary or trash directories left behind by an interrupted publish."""
        if not self.root.exists():
            return []
        return sorted(p for env in self.root.iterdir() if env.is_dir()
                      for p in env.iterdir()
                      if p.name.startswith((TEMP_PREFIX, TRASH_PREFIX)))
