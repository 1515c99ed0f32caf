import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import numpy as np
import pandas as pd

CHECKPOINT_MAGIC = b'JMWT'
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"checkpoint byte {offset}: {message}")


def encode_checkpoint(state: Dict[str, np.ndarray]) -> bytes:
    """
    JMWT layout: magic, u32 version, then per parameter
    u16 name length, name bytes, u8 rank, u32 extents, f32 values (all little-endian)
    """
    parts = [CHECKPOINT_MAGIC, struct.pack('<I', CHECKPOINT_VERSION)]
    for name, value in state.items():
        encoded = name.encode('utf-8')
        array = np.asarray(value)
        if len(encoded) > 0xFFFF or array.ndim > 0xFF:
            raise ValueError(f"Parameter {name} cannot be stored (name too long or rank too high)")
        parts.append(struct.pack('<H', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<B', array.ndim))
        parts.append(struct.pack(f'<{array.ndim}I', *array.shape))
        parts.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    return b''.join(parts)


def decode_checkpoint(payload: bytes) -> 'OrderedDict[str, np.ndarray]':
    offset = 0

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > len(payload):
            raise CheckpointFormatError(offset, f"truncated while reading {what}")
        chunk = payload[offset:offset + count]
        offset += count
        return chunk

    if take(4, 'magic') != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(0, "bad magic (expected JMWT)")
    version = struct.unpack('<I', take(4, 'version'))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(4, f"unsupported version {version}")
    state: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    while offset < len(payload):
        name_length = struct.unpack('<H', take(2, 'name length'))[0]
        name = take(name_length, 'name').decode('utf-8')
        rank = struct.unpack('<B', take(1, f'rank of {name}'))[0]
        shape = struct.unpack(f'<{rank}I', take(4 * rank, f'extents of {name}'))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(4 * count, f'values of {name}'), dtype='<f4')
        if name in state:
            raise CheckpointFormatError(offset, f"duplicate parameter {name}")
        state[name] = values.reshape(shape).astype(np.float32)
    return state


class FileOperations:
    """Checkpoints, line-delimited reports and summary tables under one output directory"""

    def __init__(self, out_dir: Union[str, Path] = 'runs'):
        self.logger = logging.getLogger(__name__)
        self.out_dir = Path(out_dir)

    def ensure_dir(self, *parts: str) -> Path:
        directory = self.out_dir.joinpath(*parts)
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    def save_checkpoint(self, state: Dict[str, np.ndarray], path: Union[str, Path], config_text: str = '') -> str:
        """
        Write a JMWT checkpoint and, when given, its model configuration as ``<path>.cfg``

        Returns:
            Path to the checkpoint
        """
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(encode_checkpoint(state))
            if config_text:
                Path(f"{path}.cfg").write_text(config_text, encoding='utf-8')
            self.logger.info(f"Checkpoint saved to {path}")
            return str(path)
        except OSError as e:
            self.logger.error(f"Error saving checkpoint: {str(e)}")
            raise

    def load_checkpoint(self, path: Union[str, Path]) -> 'OrderedDict[str, np.ndarray]':
        try:
            state = decode_checkpoint(Path(path).read_bytes())
            self.logger.info(f"Checkpoint loaded from {path} ({len(state)} tensors)")
            return state
        except (OSError, CheckpointFormatError) as e:
            self.logger.error(f"Error loading checkpoint: {str(e)}")
            raise

    def write_jsonl(self, records: Iterable[Dict[str, Any]], path: Union[str, Path]) -> str:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                for record in records:
                    f.write(json.dumps(record, default=_json_default) + '\n')
            self.logger.info(f"Records written to {path}")
            return str(path)
        except OSError as e:
            self.logger.error(f"Error writing records: {str(e)}")
            raise

    def read_jsonl(self, path: Union[str, Path]) -> List[Dict[str, Any]]:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return [json.loads(line) for line in f if line.strip()]
        except (OSError, json.JSONDecodeError) as e:
            self.logger.error(f"Error reading records from {path}: {str(e)}")
            raise

    def save_table(self, table: pd.DataFrame, stem: str) -> Dict[str, str]:
        """
        Export a summary table as plain text and comma-separated values

        Returns:
            Mapping format -> written path
        """
        try:
            directory = self.ensure_dir()
            txt_path = directory / f"{stem}.txt"
            csv_path = directory / f"{stem}.csv"
            txt_path.write_text(table.to_string(index=False) + '\n', encoding='utf-8')
            table.to_csv(csv_path, index=False)
            self.logger.info(f"Summary exported to {txt_path} and {csv_path}")
            return {'txt': str(txt_path), 'csv': str(csv_path)}
        except OSError as e:
            self.logger.error(f"Error exporting summary: {str(e)}")
            raise


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)
