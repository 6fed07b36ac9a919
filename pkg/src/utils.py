import os
import json
import hashlib
import math

import numpy as np

from src.errors import ArtifactError


def ensure_dir(directory):
    """Ensure directory exists"""
    if not os.path.exists(directory):
        os.makedirs(directory)


def load_json(path):
    """Load a JSON document, mapping I/O failures to ArtifactError"""
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ArtifactError(f"Cannot read {path}: {e}") from e


def to_jsonable(obj):
    """Convert numpy scalars/arrays and non-finite floats into plain JSON values"""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return to_jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def content_hash(payload):
    """sha256 over the canonical JSON encoding of payload"""
    blob = json.dumps(to_jsonable(payload), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(blob.encode('utf-8')).hexdigest()


def write_artifact(path, payload, config=None):
    """Write a self-describing JSON artifact: payload plus config echo and content hash"""
    document = {
        'config': to_jsonable(config) if config is not None else None,
        'content_hash': content_hash(payload),
        **to_jsonable(payload),
    }
    try:
        ensure_dir(os.path.dirname(path) or '.')
        with open(path, 'w') as f:
            json.dump(document, f, indent=2)
    except OSError as e:
        raise ArtifactError(f"Cannot write {path}: {e}") from e
    return path


def write_sidecar(path, config=None):
    """Describe a non-JSON artifact (CSV, checkpoint) with a <path>.meta.json file"""
    try:
        with open(path, 'rb') as f:
            digest = hashlib.sha256(f.read()).hexdigest()
        meta_path = f"{path}.meta.json"
        with open(meta_path, 'w') as f:
            json.dump({'config': to_jsonable(config), 'content_hash': digest, 'file': os.path.basename(path)}, f, indent=2)
    except OSError as e:
        raise ArtifactError(f"Cannot write sidecar for {path}: {e}") from e
    return meta_path


def mean_stderr(values):
    """Mean and standard error of the mean (ddof=1); stderr is 0 for fewer than two values"""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float('nan'), float('nan')
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))
