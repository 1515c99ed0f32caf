import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from core.losses_metrics import SurvivalRecord

MILB_MAGIC = b'MILB'
MILB_VERSION = 1
FLAG_COORDS = 1
FLAG_INSTANCE_LABELS = 2
FLAG_SURVIVAL = 4

SPLIT_PATTERN = re.compile(r'^(train|test|fold-(\d+))$')

Dataset = Dict[str, List['Bag']]


class BagFormatError(ValueError):
    """Malformed MILB payload; ``offset`` is the byte position of the problem"""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")


class ManifestError(ValueError):
    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"manifest line {line_number}: {message}")


@dataclass
class Bag:
    """
    One sample: instance features plus a bag-level target

    Classification bags carry ``label``; survival bags carry ``survival``.
    Features are stored in single precision, the on-disk precision.
    """

    features: np.ndarray
    label: Optional[int] = None
    survival: Optional[SurvivalRecord] = None
    coords: Optional[np.ndarray] = None
    instance_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"Bag features must be an (n, d) array with n >= 1, got {self.features.shape}")
        n = self.features.shape[0]
        if (self.label is None) == (self.survival is None):
            raise ValueError("A bag carries exactly one of a class label or a survival record")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.uint32).reshape(-1, 2)
            if self.coords.shape[0] != n:
                raise ValueError(f"Got {self.coords.shape[0]} coordinates for {n} instances")
            if len({tuple(c) for c in self.coords.tolist()}) != n:
                raise ValueError("Instance coordinates must be unique")
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=np.uint8).reshape(-1)
            if self.instance_labels.shape[0] != n:
                raise ValueError(f"Got {self.instance_labels.shape[0]} instance labels for {n} instances")
            if self.label is not None and self.label <= 1:
                if int(self.label) != int(self.instance_labels.max() > 0):
                    raise ValueError("Bag label violates the MIL rule (positive iff any positive instance)")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def positive_fraction(self) -> float:
        if self.instance_labels is None:
            return float('nan')
        return float(self.instance_labels.mean())

    def equals(self, other: 'Bag') -> bool:
        def _same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b))

        survival_same = (self.survival is None and other.survival is None) or (
            self.survival is not None and other.survival is not None
            and self.survival.time == other.survival.time and self.survival.event == other.survival.event)
        return (_same(self.features, other.features) and _same(self.coords, other.coords)
                and _same(self.instance_labels, other.instance_labels)
                and self.label == other.label and survival_same)


# -- MILB binary format ------------------------------------------------------

def encode_bag(bag: Bag) -> bytes:
    flags = 0
    if bag.coords is not None:
        flags |= FLAG_COORDS
    if bag.instance_labels is not None:
        flags |= FLAG_INSTANCE_LABELS
    if bag.survival is not None:
        flags |= FLAG_SURVIVAL
    parts = [MILB_MAGIC, struct.pack('<IIII', MILB_VERSION, flags, bag.n, bag.d),
             bag.features.astype('<f4').tobytes()]
    if bag.coords is not None:
        parts.append(bag.coords.astype('<u4').tobytes())
    if bag.instance_labels is not None:
        parts.append(bag.instance_labels.astype('u1').tobytes())
    if bag.survival is not None:
        parts.append(struct.pack('<dB', float(bag.survival.time), int(bag.survival.event)))
    else:
        parts.append(struct.pack('<I', int(bag.label)))
    return b''.join(parts)


class _Cursor:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.payload):
            raise BagFormatError(self.offset, f"truncated payload while reading {what} "
                                              f"({count} bytes needed, {len(self.payload) - self.offset} left)")
        chunk = self.payload[self.offset:self.offset + count]
        self.offset += count
        return chunk


def decode_bag(payload: bytes) -> Bag:
    cursor = _Cursor(payload)
    if cursor.take(4, 'magic') != MILB_MAGIC:
        raise BagFormatError(0, "bad magic (expected MILB)")
    version, flags, n, d = struct.unpack('<IIII', cursor.take(16, 'header'))
    if version != MILB_VERSION:
        raise BagFormatError(4, f"unsupported version {version}")
    if flags & ~(FLAG_COORDS | FLAG_INSTANCE_LABELS | FLAG_SURVIVAL):
        raise BagFormatError(8, f"unknown flag bits {flags:#x}")
    features = np.frombuffer(cursor.take(4 * n * d, 'features'), dtype='<f4').reshape(n, d)
    coords = instance_labels = survival = label = None
    if flags & FLAG_COORDS:
        coords = np.frombuffer(cursor.take(8 * n, 'coordinates'), dtype='<u4').reshape(n, 2)
    if flags & FLAG_INSTANCE_LABELS:
        instance_labels = np.frombuffer(cursor.take(n, 'instance labels'), dtype='u1')
    if flags & FLAG_SURVIVAL:
        time, event = struct.unpack('<dB', cursor.take(9, 'survival record'))
        survival = SurvivalRecord(time=time, event=event)
    else:
        label = struct.unpack('<I', cursor.take(4, 'label'))[0]
    if cursor.offset != len(payload):
        raise BagFormatError(cursor.offset, f"{len(payload) - cursor.offset} trailing bytes")
    try:
        return Bag(features=features.copy(), label=label, survival=survival,
                   coords=None if coords is None else coords.copy(),
                   instance_labels=None if instance_labels is None else instance_labels.copy())
    except ValueError as e:
        raise BagFormatError(0, f"invalid bag content: {e}") from None


def write_bag(bag: Bag, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path: Union[str, Path]) -> Bag:
    return decode_bag(Path(path).read_bytes())


# -- datasets ----------------------------------------------------------------

class DataHandler:
    """Dataset handling: bag files, manifests, cross-validation splits and summaries"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def save_bag(self, bag: Bag, path: Union[str, Path]) -> str:
        try:
            write_bag(bag, path)
            return str(path)
        except OSError as e:
            self.logger.error(f"Error writing bag {path}: {str(e)}")
            raise

    def load_bag(self, path: Union[str, Path]) -> Bag:
        try:
            return read_bag(path)
        except (OSError, BagFormatError) as e:
            self.logger.error(f"Error reading bag {path}: {str(e)}")
            raise

    def write_dataset(self, splits: Dict[str, List[Bag]], directory: Union[str, Path]) -> Path:
        """
        Write every bag as a MILB file plus a manifest naming its split

        Args:
            splits: Mapping split tag -> bags
            directory: Output directory (created if needed)

        Returns:
            Path to the manifest
        """
        directory = Path(directory)
        (directory / 'bags').mkdir(parents=True, exist_ok=True)
        lines = ['# bag path, split']
        for split, bags in splits.items():
            if not SPLIT_PATTERN.match(split):
                raise ValueError(f"Invalid split tag: {split}")
            for i, bag in enumerate(bags):
                relative = Path('bags') / f"{split}_{i:05d}.milb"
                self.save_bag(bag, directory / relative)
                lines.append(f"{relative.as_posix()},{split}")
        manifest = directory / 'manifest.txt'
        manifest.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        self.logger.info(f"Wrote {len(lines) - 1} bags and manifest {manifest}")
        return manifest

    def parse_manifest(self, text: str) -> List[Tuple[str, str]]:
        """Parse manifest text into ordered, de-duplicated (path, split) records"""
        records: List[Tuple[str, str]] = []
        seen: Dict[str, int] = {}
        for line_number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            fields = [f.strip() for f in line.split(',')]
            if len(fields) != 2 or not fields[0]:
                raise ManifestError(line_number, f"expected 'path,split', got {raw!r}")
            path, split = fields
            if not SPLIT_PATTERN.match(split):
                raise ManifestError(line_number, f"unknown split tag {split!r} (train, test or fold-k)")
            if path in seen:
                self.logger.warning(f"Duplicate manifest entry {path} on line {line_number} "
                                    f"(first seen on line {seen[path]}); ignored")
                continue
            seen[path] = line_number
            records.append((path, split))
        return records

    def load_manifest(self, path: Union[str, Path]) -> Dataset:
        """
        Load every bag named by a manifest, grouped by split

        Relative bag paths resolve against the manifest's directory.
        """
        path = Path(path)
        records = self.parse_manifest(path.read_text(encoding='utf-8'))
        if not records:
            self.logger.warning(f"Manifest {path} lists no bags")
            return {}
        resolved = [((path.parent / p) if not Path(p).is_absolute() else Path(p), split) for p, split in records]
        missing = [str(p) for p, _ in resolved if not p.exists()]
        if missing:
            raise FileNotFoundError(f"{len(missing)} bag file(s) listed in {path} are missing: {', '.join(missing)}")
        dataset: Dataset = {}
        for bag_path, split in resolved:
            dataset.setdefault(split, []).append(self.load_bag(bag_path))
        self.logger.info(f"Loaded {len(resolved)} bags from {path}: "
                         + ', '.join(f"{k}={len(v)}" for k, v in dataset.items()))
        return dataset

    @staticmethod
    def fold_splits(dataset: Dataset) -> List[Tuple[int, List[Bag], List[Bag]]]:
        """(k, train bags, held-out bags) for every fold-k group"""
        folds = sorted(int(SPLIT_PATTERN.match(tag).group(2)) for tag in dataset if tag.startswith('fold-'))
        splits = []
        for k in folds:
            held_out = dataset[f'fold-{k}']
            train = [bag for j in folds if j != k for bag in dataset[f'fold-{j}']]
            splits.append((k, train, held_out))
        return splits

    @staticmethod
    def describe(dataset: Dataset) -> pd.DataFrame:
        """Per-split summary: bag count, instance counts, label balance, censoring"""
        rows = []
        for split, bags in dataset.items():
            sizes = [bag.n for bag in bags]
            labels = [bag.label for bag in bags if bag.label is not None]
            events = [bag.survival.event for bag in bags if bag.survival is not None]
            rows.append({
                'split': split,
                'bags': len(bags),
                'mean_instances': float(np.mean(sizes)) if sizes else 0.0,
                'positive_rate': float(np.mean([l > 0 for l in labels])) if labels else float('nan'),
                'censored_rate': float(1 - np.mean(events)) if events else float('nan'),
            })
        return pd.DataFrame(rows)
