import json
import math
import re
import zlib
from pathlib import Path
from typing import Dict, List, Any, Optional, Union

import numpy as np

from tempest.errors import InvalidArgumentError

PathLike = Union[str, Path]


def substream(seed: int, name: str) -> np.random.Generator:
    """
    Derive an independent random stream from the run seed.

    Args:
        seed: The run's 64-bit seed
        name: Stream name, e.g. "net-init", "noise-input", "corruption", "sampling", "bo"

    Returns:
        A generator that depends only on (seed, name)
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed & (2**64 - 1), spawn_key=(key,)))


def write_pgm(path: PathLike, image: np.ndarray, bits: int = 16) -> None:
    """
    Write a binary PGM, mapping [0, 1] linearly onto the full integer range.

    Args:
        path: Output file
        image: 2-D array; values are clipped to [0, 1]
        bits: 8 or 16
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise InvalidArgumentError(f"PGM needs a 2-D image, got shape {image.shape}")
    if bits not in (8, 16):
        raise InvalidArgumentError(f"unsupported PGM depth {bits}")
    maxval = 65535 if bits == 16 else 255
    dtype = ">u2" if bits == 16 else "u1"
    levels = np.round(np.clip(image, 0.0, 1.0) * maxval).astype(dtype)
    height, width = image.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + levels.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    """
    Read an 8- or 16-bit binary PGM into [0, 1].

    Args:
        path: PGM file

    Returns:
        2-D float64 array
    """
    raw = Path(path).read_bytes()
    tokens: List[bytes] = []
    pos = 0
    # Header: magic, width, height, maxval, separated by whitespace and optional comments.
    while len(tokens) < 4:
        match = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(raw, pos)
        if match is None:
            raise InvalidArgumentError(f"{path}: truncated PGM header")
        tokens.append(match.group(2))
        pos = match.end()
    if tokens[0] != b"P5":
        raise InvalidArgumentError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = "u1" if maxval < 256 else ">u2"
    count = width * height
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return data.reshape(height, width).astype(np.float64) / maxval


def format_value(value: Optional[float]) -> str:
    """Format a metric for CSV output; +inf becomes the "inf" sentinel."""
    if value is None:
        return ""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


def set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
    """
    Set ``data["a"]["b"]["c"] = value`` for the key "a.b.c", creating levels as needed.
    """
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def parse_override(text: str) -> tuple:
    """
    Parse a ``key=value`` override; the value is read as JSON when possible.

    Args:
        text: e.g. "run.temper.temperature=1e-6" or "name=ct-slice"

    Returns:
        (key, value)
    """
    if "=" not in text:
        raise InvalidArgumentError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value

