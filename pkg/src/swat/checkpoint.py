"""Binary checkpoints: magic 'SWAT', version, layer table, parameter and
momentum payloads as little-endian 32-bit reals, config snapshot, RNG
state, plus the threshold-cache/frozen-mask state needed to resume a run
bit-for-bit from the checkpoint iteration.

Layout: 4-byte magic, u32 version, u64 header length, canonical-JSON
header, then the raw array payload in header order. Serialization is
deterministic, so save -> load -> save is byte identical.
"""

import dataclasses
import json
import struct

import numpy as np

from . import network as netmod
from .config import dump_config, load_config
from .network import Network
from .sparsify import CacheEntry, ThresholdCache

MAGIC = b"SWAT"
VERSION = 1

_KINDS = {cls.__name__.lower(): cls for cls in netmod.LAYER_KINDS}


class CheckpointError(RuntimeError):
    pass


def _jsonable_rng(state):
    if isinstance(state, dict):
        return {k: _jsonable_rng(v) for k, v in state.items()}
    if isinstance(state, np.ndarray):
        return {"__ndarray__": state.tolist(), "dtype": str(state.dtype)}
    if isinstance(state, (np.integer,)):
        return int(state)
    if isinstance(state, int) and abs(state) > 2**53:
        return {"__bigint__": str(state)}
    return state


def _restore_rng(state):
    if isinstance(state, dict):
        if "__bigint__" in state:
            return int(state["__bigint__"])
        if "__ndarray__" in state:
            return np.array(state["__ndarray__"], dtype=state["dtype"])
        return {k: _restore_rng(v) for k, v in state.items()}
    return state


def _layer_table(net):
    table = []
    for spec in net.layers:
        table.append({"kind": type(spec).__name__.lower(),
                      "args": dataclasses.asdict(spec)})
    return table


def _arrays_to_save(net, extra):
    arrays = []

    def add(name, arr, dtype):
        arrays.append((name, np.ascontiguousarray(arr, dtype=dtype)))

    for lid in range(len(net.layers)):
        for name, p in sorted(net.params[lid].items()):
            add(f"params/{lid}/{name}", p, "<f4")
        for name, b in sorted(net.buffers[lid].items()):
            add(f"buffers/{lid}/{name}", b, "<f4")
        for name, m in sorted(net.momentum[lid].items()):
            add(f"momentum/{lid}/{name}", m, "<f4")
    cache = extra.get("cache")
    if cache is not None:
        for lid in sorted(cache.entries):
            add(f"cache/{lid}/t_w", np.atleast_1d(cache.entries[lid].t_w), "<f8")
    frozen = extra.get("frozen_masks")
    if frozen:
        for lid in sorted(frozen):
            add(f"frozen/{lid}", frozen[lid], "u1")
    return arrays


def checkpoint_save(path, net, cfg, rng, iteration=0, epoch=1,
                    cache=None, frozen_masks=None):
    extra = {"cache": cache, "frozen_masks": frozen_masks}
    arrays = _arrays_to_save(net, extra)
    header = {
        "layer_table": _layer_table(net),
        "wiring": [list(w) for w in net.wiring],
        "input_shape": list(net.input_shape),
        "config": dump_config(cfg),
        "rng_state": _jsonable_rng(rng.bit_generator.state),
        "iteration": iteration,
        "epoch": epoch,
        "cache": None if cache is None else {
            "period": cache.period,
            "entries": {str(lid): {"t_a": float(e.t_a),
                                   "last_sample_iter": e.last_sample_iter}
                        for lid, e in cache.entries.items()}},
        "frozen_layers": sorted(frozen_masks) if frozen_masks else [],
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.str}
                   for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(a.tobytes())


def checkpoint_load(path):
    """Returns (net, cfg, state dict with rng_state/iteration/epoch/cache/frozen_masks)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                                  f"(this build reads version {VERSION})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    layers = [_KINDS[row["kind"]](**row["args"]) for row in header["layer_table"]]
    cfg = load_config(text=header["config"])
    net = Network(layers, header["input_shape"],
                  wiring=[tuple(w) for w in header["wiring"]], dtype=cfg.dtype)
    offset = 0
    arrays = {}
    for meta in header["arrays"]:
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=offset)
        offset += count * dt.itemsize
        arrays[meta["name"]] = arr.reshape(meta["shape"])
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload size mismatch "
                              f"({len(payload)} bytes, expected {offset})")
    for name, arr in arrays.items():
        parts = name.split("/")
        if parts[0] in ("params", "buffers", "momentum"):
            store = getattr(net, parts[0])
            lid, pname = int(parts[1]), parts[2]
            if pname not in store[lid] or store[lid][pname].shape != arr.shape:
                raise CheckpointError(f"{path}: unexpected array {name} {arr.shape}")
            store[lid][pname][...] = arr.astype(net.dtype)
    cache = None
    if header["cache"] is not None:
        cache = ThresholdCache(period=header["cache"]["period"])
        for lid_s, entry in header["cache"]["entries"].items():
            lid = int(lid_s)
            t_w = arrays.get(f"cache/{lid}/t_w", np.zeros(1))
            cache.entries[lid] = CacheEntry(
                t_w=t_w.astype(np.float64) if t_w.size > 1 else np.float64(t_w[0]),
                t_a=entry["t_a"], last_sample_iter=entry["last_sample_iter"])
    frozen = {}
    for lid in header["frozen_layers"]:
        frozen[lid] = arrays[f"frozen/{lid}"].astype(bool)
    state = {
        "rng_state": _restore_rng(header["rng_state"]),
        "iteration": header["iteration"],
        "epoch": header["epoch"],
        "cache": cache,
        "frozen_masks": frozen or None,
    }
    return net, cfg, state
