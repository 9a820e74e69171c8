import fcntl
import hashlib
import io
import json
import logging
import math
import struct
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch

from app.models.models import RunRecord
from app.utils.exceptions import ArtifactMismatchError, ResolutionError

logger = logging.getLogger("artifacts")

CHECKPOINT_MAGIC = b'TACTCKPT'
HASH_CHUNK = 1 << 20


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(',', ':'))


def _json_float(value: float) -> str:
    if not math.isfinite(value):
        return json.dumps(value)
    return '%#.17g' % value


def decimal_json(payload: Any, indent: Optional[int] = None, sort_keys: bool = False, _level: int = 0) -> str:
    """JSON text with every float written out to 17 significant digits"""
    if isinstance(payload, (bool, str)) or payload is None:
        return json.dumps(payload)
    if isinstance(payload, (float, np.floating)):
        return _json_float(float(payload))
    if isinstance(payload, (int, np.integer)):
        return str(int(payload))
    if isinstance(payload, np.ndarray):
        payload = payload.tolist()

    if isinstance(payload, dict):
        items = sorted(payload.items()) if sort_keys else payload.items()
        parts = [f"{json.dumps(str(k))}: {decimal_json(v, indent, sort_keys, _level + 1)}" for k, v in items]
        opening, closing = '{', '}'
    elif isinstance(payload, (list, tuple)):
        parts = [decimal_json(v, indent, sort_keys, _level + 1) for v in payload]
        opening, closing = '[', ']'
    else:
        raise TypeError(f"Object of type {type(payload).__name__} is not JSON serializable")

    if not parts:
        return opening + closing
    if indent is None:
        return opening + ', '.join(parts) + closing
    inner = '\n' + ' ' * (indent * (_level + 1))
    return opening + inner + (',' + inner).join(parts) + '\n' + ' ' * (indent * _level) + closing


def write_decimal_json(path: Path, payload: Any, indent: Optional[int] = 2, sort_keys: bool = False) -> None:
    with open(path, 'w') as f:
        f.write(decimal_json(payload, indent, sort_keys) + '\n')


def config_sha256(payload: Dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(payload).encode('utf-8')).hexdigest()


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(HASH_CHUNK), b''):
            digest.update(chunk)
    return digest.hexdigest()


def tree_sha256(root: Path, exclude: Iterable[str] = ()) -> str:
    """Content hash of a directory tree: relative paths and file bytes, in sorted order"""
    root = Path(root)
    skip = set(exclude)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob('*') if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel in skip:
            continue
        digest.update(rel.encode('utf-8'))
        digest.update(b'\0')
        digest.update(bytes.fromhex(file_sha256(path)))
    return digest.hexdigest()


def write_checkpoint(path: Path, header: Dict[str, Any], tensors: Dict[str, Any]) -> str:
    """Write magic + header length + JSON header + torch payload; returns the file hash"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    torch.save(tensors, buffer)
    header_bytes = canonical_json(header).encode('utf-8')
    tmp = path.with_suffix(path.suffix + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<Q', len(header_bytes)))
        f.write(header_bytes)
        f.write(buffer.getvalue())
    tmp.replace(path)
    return file_sha256(path)


def read_checkpoint_header(path: Path) -> Dict[str, Any]:
    with open(path, 'rb') as f:
        header, _ = _read_header(f, path)
    return header


def read_checkpoint(path: Path, map_location: str = 'cpu') -> Tuple[Dict[str, Any], Dict[str, Any]]:
    path = Path(path)
    with open(path, 'rb') as f:
        header, _ = _read_header(f, path)
        payload = f.read()
    tensors = torch.load(io.BytesIO(payload), map_location=map_location, weights_only=False)
    return header, tensors


def _read_header(f, path: Path) -> Tuple[Dict[str, Any], int]:
    magic = f.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ArtifactMismatchError(f"{path} is not a checkpoint file", {'path': str(path)})
    (length,) = struct.unpack('<Q', f.read(8))
    header = json.loads(f.read(length).decode('utf-8'))
    return header, length


def expect_kind(header: Dict[str, Any], kind: str, path: Path) -> None:
    if header.get('kind') != kind:
        raise ArtifactMismatchError(
            f"{path} holds a '{header.get('kind')}' artifact, expected '{kind}'",
            {'path': str(path), 'kind': header.get('kind'), 'expected': kind},
        )


class RunRegistry:
    """Append-only JSONL log of runs; the only place artifact hashes are resolved"""

    def __init__(self, workspace: Path, filename: str = 'runs.jsonl'):
        self.workspace = Path(workspace)
        self.path = self.workspace / filename
        self.logger = logging.getLogger("run_registry")

    @staticmethod
    def new_run_id() -> str:
        return uuid.uuid4().hex[:12]

    @staticmethod
    def now() -> str:
        return datetime.now(timezone.utc).isoformat()

    def append(self, record: RunRecord) -> None:
        self.workspace.mkdir(parents=True, exist_ok=True)
        line = canonical_json(record.to_record()) + '\n'
        with open(self.path, 'a') as f:
            fcntl.flock(f.fileno(), fcntl.LOCK_EX)
            try:
                f.write(line)
                f.flush()
            finally:
                fcntl.flock(f.fileno(), fcntl.LOCK_UN)
        self.logger.info(f"Registered run {record.run_id} ({record.command}, status={record.status})")

    def records(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        rows = []
        with open(self.path, 'r') as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
        return rows

    def find_output(self, content_hash: str) -> Optional[Dict[str, str]]:
        """Latest registered output whose hash starts with the given hex string"""
        for record in reversed(self.records()):
            for output in record.get('outputs', {}).values():
                if output.get('hash', '').startswith(content_hash):
                    return output
        return None

    def resolve_artifact(self, reference: str) -> Path:
        """Accept a filesystem path or a registered content hash"""
        path = Path(reference)
        if path.exists():
            return path
        if len(reference) >= 8 and all(c in '0123456789abcdef' for c in reference.lower()):
            output = self.find_output(reference.lower())
            if output is not None:
                candidate = Path(output['path'])
                if candidate.exists():
                    return candidate
                raise ResolutionError(
                    f"Artifact {reference} is registered at {candidate} but the file is missing",
                    {'hash': reference, 'path': str(candidate)},
                )
            raise ResolutionError(f"No registered artifact with hash {reference}", {'hash': reference})
        raise ResolutionError(f"Artifact not found: {reference}", {'hash': reference})
