"""Checkpoint retention and bit-exact state serialization.

The forward pass records every state once; the retention policy decides
which of them stay live. Two policies exist:

* ``retain-all`` keeps all T+1 states (O(T) memory, zero recomputation);
* ``logarithmic`` keeps step 0, the final step, and the midpoints along the
  right spine of the binary segment tree over [0, T). Those are exactly the
  states the reverse pass consumes first, so it starts with no recompute
  debt and rematerializes the rest segment-recursively, holding
  O(log T) states at any moment.

Serialized states use a versioned little-endian format: magic, version,
step index, parameter dimension, moment-block count, then the raw float64
payload per block. Round-tripping through a file is bit-exact; that is part
of the contract, not an implementation detail.
"""

from __future__ import annotations

import os
import struct
from functools import lru_cache

import numpy as np

from .errors import CheckpointMissingError
from .optim import OptimizerState

STATE_MAGIC = b"RTRCKPT1"
VECTOR_MAGIC = b"RTRVECT1"
FORMAT_VERSION = 1

POLICY_RETAIN_ALL = "retain-all"
POLICY_LOGARITHMIC = "logarithmic"


def write_state(path, state: OptimizerState) -> None:
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<IQQI", FORMAT_VERSION, state.step_index,
                             len(state.params), len(state.moments)))
        fh.write(np.ascontiguousarray(state.params, dtype="<f8").tobytes())
        for block in state.moments:
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def read_state(path) -> OptimizerState:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != STATE_MAGIC:
            raise ValueError(f"{path}: not a state file (bad magic)")
        version, step_index, param_dim, n_moments = struct.unpack(
            "<IQQI", fh.read(24)
        )
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        blocks = []
        for _ in range(n_moments + 1):
            raw = fh.read(8 * param_dim)
            if len(raw) != 8 * param_dim:
                raise ValueError(f"{path}: truncated state file")
            blocks.append(np.frombuffer(raw, dtype="<f8").copy())
    return OptimizerState(blocks[0], tuple(blocks[1:]), int(step_index))


def write_vector(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(VECTOR_MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(values)))
        fh.write(values.tobytes())


def read_vector(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != VECTOR_MAGIC:
            raise ValueError(f"{path}: not a vector file (bad magic)")
        version, length = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        raw = fh.read(8 * length)
        if len(raw) != 8 * length:
            raise ValueError(f"{path}: truncated vector file")
    return np.frombuffer(raw, dtype="<f8").copy()


@lru_cache(maxsize=None)
def spine_steps(total_steps: int) -> frozenset:
    """Steps retained by the logarithmic policy: {0, T} plus the right-spine
    midpoints of the binary recursion over [0, T)."""
    anchors = {0, total_steps}
    lo, hi = 0, total_steps
    while hi - lo > 1:
        mid = (lo + hi) // 2
        anchors.add(mid)
        lo = mid
    return frozenset(anchors)


class RetainAll:
    name = POLICY_RETAIN_ALL

    def keep(self, t: int, total_steps: int) -> bool:
        return True


class LogarithmicRetention:
    name = POLICY_LOGARITHMIC

    def keep(self, t: int, total_steps: int) -> bool:
        return t in spine_steps(total_steps)


def policy_by_name(name: str):
    if name == POLICY_RETAIN_ALL:
        return RetainAll()
    if name == POLICY_LOGARITHMIC:
        return LogarithmicRetention()
    raise ValueError(f"unknown retention policy {name!r}")


class CheckpointStore:
    """Retained optimizer states keyed by step index, in memory or spilled.

    The store is append-only during the forward pass and read-only during
    replay; per-pass transient rematerializations are tracked by the replay
    itself so several measurement replays can share one store.
    """

    def __init__(self, total_steps: int, policy, spill_dir=None):
        self.total_steps = total_steps
        self.policy = policy
        self.spill_dir = spill_dir
        self.forward_steps_total = 0
        self._mem = {}
        self._paths = {}
        if spill_dir is not None:
            os.makedirs(spill_dir, exist_ok=True)

    def _path_for(self, t: int) -> str:
        return os.path.join(self.spill_dir, f"step_{t:08d}.bin")

    def record(self, t: int, state: OptimizerState) -> None:
        if t > 0:
            self.forward_steps_total += 1
        if self.policy.keep(t, self.total_steps):
            if self.spill_dir is not None:
                path = self._path_for(t)
                write_state(path, state)
                self._paths[t] = path
            else:
                self._mem[t] = state

    def has(self, t: int) -> bool:
        return t in self._mem or t in self._paths

    def get(self, t: int) -> OptimizerState:
        if t in self._mem:
            return self._mem[t]
        if t in self._paths:
            return read_state(self._paths[t])
        raise CheckpointMissingError(t)

    def retained_steps(self):
        return sorted(set(self._mem) | set(self._paths))

    @classmethod
    def open_dir(cls, spill_dir, total_steps: int) -> "CheckpointStore":
        """Rebuild a read-only store from a directory of spilled state files."""
        store = cls(total_steps, policy_by_name(POLICY_LOGARITHMIC))
        store.spill_dir = spill_dir
        store.forward_steps_total = total_steps
        for name in sorted(os.listdir(spill_dir)):
            if name.startswith("step_") and name.endswith(".bin"):
                t = int(name[5:-4])
                store._paths[t] = os.path.join(spill_dir, name)
        if 0 not in store._paths:
            raise CheckpointMissingError(0)
        return store
