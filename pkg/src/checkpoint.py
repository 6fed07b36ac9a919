"""Model checkpoints: magic, JSON header, raw little-endian payloads. See docs/checkpoint_format.md."""
import json
import os
import struct

import numpy as np

from src.errors import ArtifactError
from src.logger import logger
from src.utils import ensure_dir, to_jsonable

MAGIC = b'GINITCK1'
FORMAT_VERSION = 1
DTYPES = {'float64': '<f8', 'float32': '<f4'}


def save_checkpoint(path, model, meta=None):
    """Write every parameter block of ``model``; returns the header written"""
    dtype = np.dtype(model.blocks[0].data.dtype).name if model.blocks else 'float64'
    if dtype not in DTYPES:
        raise ArtifactError(f"unsupported checkpoint dtype {dtype}")
    blocks, payloads, offset = [], [], 0
    for b in model.blocks:
        raw = np.ascontiguousarray(b.data, dtype=DTYPES[dtype]).tobytes()
        blocks.append({'name': b.name, 'role': b.role, 'shape': list(b.shape), 'offset': offset, 'nbytes': len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {'format_version': FORMAT_VERSION, 'dtype': dtype, 'blocks': blocks, 'meta': to_jsonable(meta or {})}
    encoded = json.dumps(header, sort_keys=True).encode('utf-8')
    try:
        ensure_dir(os.path.dirname(path) or '.')
        with open(path, 'wb') as f:
            f.write(MAGIC)
            f.write(struct.pack('<Q', len(encoded)))
            f.write(encoded)
            for raw in payloads:
                f.write(raw)
    except OSError as e:
        raise ArtifactError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint with {len(blocks)} blocks to {path}")
    return header


def read_header(f, path):
    if f.read(len(MAGIC)) != MAGIC:
        raise ArtifactError(f"{path} is not a checkpoint (bad magic)")
    size = f.read(8)
    if len(size) != 8:
        raise ArtifactError(f"{path}: truncated header length")
    (length,) = struct.unpack('<Q', size)
    try:
        header = json.loads(f.read(length).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"{path}: corrupt header: {e}") from e
    if header.get('format_version') != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported format version {header.get('format_version')}")
    if header.get('dtype') not in DTYPES:
        raise ArtifactError(f"{path}: unsupported dtype {header.get('dtype')}")
    return header


def load_checkpoint(path, model=None):
    """Read (state, header); with a model, also load the state into it"""
    try:
        with open(path, 'rb') as f:
            header = read_header(f, path)
            payload = f.read()
    except OSError as e:
        raise ArtifactError(f"Cannot read checkpoint {path}: {e}") from e

    dtype = np.dtype(DTYPES[header['dtype']])
    state = {}
    for entry in header['blocks']:
        start, nbytes = entry['offset'], entry['nbytes']
        shape = tuple(entry['shape'])
        if start + nbytes > len(payload) or nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise ArtifactError(f"{path}: block {entry['name']} is truncated or mis-sized")
        state[entry['name']] = np.frombuffer(payload, dtype, count=nbytes // dtype.itemsize, offset=start) \
            .reshape(shape).astype(dtype.newbyteorder('='))

    if model is not None:
        expected = model.block_names()
        if list(state) != expected:
            raise ArtifactError(f"{path}: blocks {list(state)[:3]}... do not match the model's {expected[:3]}...")
        model.load_state(state)
    return state, header
