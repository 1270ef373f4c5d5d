"""Small shared helpers: deterministic seeding and atomic file writes."""

import hashlib
import os
import tempfile

import torch


def derive_seed(root_seed: int, *tags) -> int:
    """Stable 63-bit seed for (root_seed, *tags).

    Every stochastic draw in the pipeline gets its generator seed from here,
    keyed by iteration and purpose, so resuming from a checkpoint replays the
    exact same randomness without serializing RNG state.
    """
    key = ":".join(str(t) for t in (root_seed, *tags))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def make_generator(root_seed: int, *tags) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root_seed, *tags))
    return gen


def atomic_write_bytes(path, data: bytes) -> None:
    """Write-temp-then-rename so readers never observe a partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
