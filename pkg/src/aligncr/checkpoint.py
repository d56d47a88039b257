"""Checkpoint directories: named parameter arrays plus a text config echo.

Layout::

    <dir>/params.bin   model state (array bundle, see data.io.write_arrays)
    <dir>/optim.bin    Adam state per parameter index (optional)
    <dir>/config.txt   [model] / [train] / [loss] / [meta] key = value sections
"""

from __future__ import annotations

import configparser
from pathlib import Path

import numpy as np
import torch

from .data.io import read_arrays, write_arrays
from .model import AlignCR, ModelConfig


def _state_arrays(state):
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def _parser():
    cp = configparser.ConfigParser()
    cp.optionxform = str
    return cp


def _render_config(sections):
    cp = _parser()
    for name, values in sections.items():
        cp[name] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in values.items()}
    lines = []
    for name in cp.sections():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in cp[name].items())
        lines.append("")
    return "\n".join(lines)


def read_config_echo(path):
    cp = _parser()
    cp.read_string(Path(path).read_text())
    return {s: dict(cp[s]) for s in cp.sections()}


def save_checkpoint(path, model, optimizer=None, train=None, loss=None, meta=None):
    """Write ``model`` (and optionally Adam state) to checkpoint directory ``path``.

    ``train``, ``loss`` and ``meta`` are flat dicts echoed into config.txt.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_arrays(path / "params.bin", _state_arrays(model.state_dict()))
    if optimizer is not None:
        arrays = {}
        for idx, st in optimizer.state_dict()["state"].items():
            for key, val in st.items():
                arrays[f"{idx}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
        write_arrays(path / "optim.bin", arrays)
    sections = {"model": model.cfg.to_dict()}
    for name, d in (("train", train), ("loss", loss), ("meta", meta)):
        if d:
            sections[name] = d
    (path / "config.txt").write_text(_render_config(sections))


def load_checkpoint(path, expect=None):
    """Rebuild the model stored in ``path``.

    Args:
        path (str | Path): checkpoint directory.
        expect (ModelConfig | None): if given, the stored config must match.

    Returns:
        tuple: (model, config echo dict).
    """
    path = Path(path)
    if not (path / "params.bin").is_file() or not (path / "config.txt").is_file():
        raise FileNotFoundError(f"{path} is not a checkpoint directory")
    echo = read_config_echo(path / "config.txt")
    cfg = ModelConfig.from_dict(echo["model"])
    if expect is not None and expect != cfg:
        raise ValueError(f"checkpoint config {cfg} does not match requested {expect}")
    arrays = read_arrays(path / "params.bin")
    model = AlignCR(cfg)
    dtype = next(iter(arrays.values())).dtype if arrays else np.float32
    if dtype == np.float64:
        model = model.double()
    state = model.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise ValueError(f"checkpoint parameters mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    model.load_state_dict({k: torch.from_numpy(arrays[k]) for k in state})
    return model, echo


def load_optimizer_state(path, optimizer):
    """Restore Adam moments written by :func:`save_checkpoint` into ``optimizer``."""
    file = Path(path) / "optim.bin"
    if not file.is_file():
        raise FileNotFoundError(f"{file} missing; checkpoint has no optimizer state")
    arrays = read_arrays(file)
    sd = optimizer.state_dict()
    state = {}
    for name, arr in arrays.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr)
    sd["state"] = state
    optimizer.load_state_dict(sd)
