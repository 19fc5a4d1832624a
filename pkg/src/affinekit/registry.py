"""Per-task adapter sets, the task registry, and the AFNR file container.

File layout (all integers little-endian)::

    b"AFNR" | version u16 | section u8 | fingerprint 32 bytes
    | name (u32 length + UTF-8) | entry count u32
    | entries: layer_id (u32 + UTF-8), role (u32 + UTF-8), dtype u8,
               ndim u8, dims u32 * ndim, raw array bytes

Section 0 holds an adapter set, section 1 a backbone checkpoint. Arrays are
stored as IEEE-754 float32 (dtype 0) or float64 (dtype 1); dtype 2 is raw
UTF-8 text used for the architecture record of a checkpoint.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .affiner import (AFFINER_GROUPS, VARIANTS, AffinerParams, BiasOnlyParams, LoraParams, affiner_init,
                      bias_only_init, lora_init)
from .autodiff import Tensor
from .backbone import Backbone, RegistryError, build_backbone
from .config import ArchConfig
from .nn import kaiming_normal

MAGIC = b"AFNR"
VERSION = 1
SECTION_ADAPTER = 0
SECTION_BACKBONE = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TEXT = 2


class AdapterFileError(ValueError):
    pass


class FormatError(AdapterFileError):
    pass


class VersionError(AdapterFileError):
    pass


class TruncatedFileError(AdapterFileError):
    pass


class FingerprintMismatchError(AdapterFileError):
    pass


class CompositionError(RuntimeError):
    pass


@dataclass(eq=False)
class AdapterSet:
    task_name: str
    backbone_fingerprint: bytes
    entries: dict = field(default_factory=dict)
    new_class_rows: Tensor | None = None
    cond_gate: Tensor | None = None
    cond_proj: Tensor | None = None
    method: str = "affiner"
    created_from: str = "fresh"

    def tensors(self) -> dict[str, Tensor]:
        """Every stored array keyed ``layer_id/role`` in a fixed order."""
        out = {}
        for lid, p in self.entries.items():
            for role, t in p.tensors().items():
                out[f"{lid}/{role}"] = t
        if self.new_class_rows is not None:
            out["classes/rows"] = self.new_class_rows
        if self.cond_gate is not None:
            out["cond/gate"] = self.cond_gate
            out["cond/proj"] = self.cond_proj
        return out

    def parameters(self) -> list[Tensor]:
        return [t for t in self.tensors().values() if t.requires_grad]

    def n_params(self, trainable_only: bool = True) -> int:
        ts = self.parameters() if trainable_only else list(self.tensors().values())
        return sum(t.size for t in ts)

    @property
    def n_new_classes(self) -> int:
        return 0 if self.new_class_rows is None else self.new_class_rows.shape[0]

    def set_variant(self, variant: str) -> None:
        """Restrict training to one of the ablation variants (Affiner sets only)."""
        groups = VARIANTS[variant]
        for p in self.entries.values():
            if not isinstance(p, AffinerParams):
                raise ValueError("variants apply to Affiner sets only")
            p.set_trainable(groups)

    def check_bound(self, backbone: Backbone) -> None:
        if self.backbone_fingerprint != backbone.fingerprint():
            raise FingerprintMismatchError(
                f"adapter set {self.task_name!r} was built for a different backbone")
        unknown = set(self.entries) - set(backbone.wrapped_layers())
        if unknown:
            raise RegistryError(f"adapter set {self.task_name!r} names unknown layers {sorted(unknown)[:5]}")

    def state_bytes(self) -> bytes:
        return b"".join(t.data.tobytes() for t in self.tensors().values())


def create_adapter_set(backbone: Backbone, task_name: str, d_rank: int, with_classes: int = 0,
                       with_cond: bool = False, seed: int = 0, method: str = "affiner",
                       cond_channels: int | None = None) -> AdapterSet:
    """Fresh parameters for every wrapped layer; a no-op on the backbone output."""
    if with_classes < 0:
        raise ValueError("with_classes must be >= 0")
    rng = np.random.default_rng(seed)
    dtype = backbone.class_table.rows.dtype.type
    entries = {}
    for lid, layer in backbone.wrapped_layers().items():
        m, n = layer.m, layer.branch_in_features
        if method == "affiner":
            entries[lid] = affiner_init(m, n, d_rank, rng=rng, dtype=dtype)
        elif method == "lora":
            if ".attn." in lid:
                entries[lid] = lora_init(m, n, d_rank, rng=rng, dtype=dtype)
        elif method == "bias-only":
            entries[lid] = bias_only_init(m, dtype=dtype)
        else:
            raise ValueError(f"unknown adapter method {method!r}")
    rows = None
    if with_classes:
        table = backbone.class_table
        uc = table.rows.data[table.uncond_index]
        rows = Tensor(np.repeat(uc[None, :], with_classes, axis=0), requires_grad=True)
    gate = proj = None
    if with_cond:
        a = backbone.arch
        cc = cond_channels if cond_channels is not None else a.channels
        fan_in = cc * a.patch * a.patch
        gate = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        proj = Tensor(kaiming_normal(rng, (a.hidden, fan_in), fan_in, dtype=dtype), requires_grad=True)
    return AdapterSet(task_name, backbone.fingerprint(), entries, rows, gate, proj, method, "fresh")


class Registry:
    """Named adapter sets over one frozen backbone; at most one is active."""

    def __init__(self, backbone: Backbone):
        self.backbone = backbone
        self.sets: dict[str, AdapterSet] = {}
        self.active_name: str | None = None

    def create(self, task_name: str, d_rank: int, **kwargs) -> AdapterSet:
        if task_name in self.sets:
            raise RegistryError(f"task {task_name!r} already exists")
        s = create_adapter_set(self.backbone, task_name, d_rank, **kwargs)
        self.sets[task_name] = s
        return s

    def add(self, adapter_set: AdapterSet) -> AdapterSet:
        if adapter_set.task_name in self.sets:
            raise RegistryError(f"task {adapter_set.task_name!r} already exists")
        adapter_set.check_bound(self.backbone)
        self.sets[adapter_set.task_name] = adapter_set
        return adapter_set

    def switch_task(self, task_name: str | None) -> AdapterSet | None:
        if task_name is None:
            self.active_name = None
            return None
        if task_name not in self.sets:
            raise RegistryError(f"unknown task {task_name!r}")
        s = self.sets[task_name]
        s.check_bound(self.backbone)
        self.active_name = task_name
        return s

    def activate(self, *task_names: str) -> AdapterSet | None:
        if len(task_names) > 1:
            raise CompositionError("only one adapter set can be active; weight merging is not supported")
        return self.switch_task(task_names[0] if task_names else None)

    @property
    def active(self) -> AdapterSet | None:
        return None if self.active_name is None else self.sets[self.active_name]

    def forward(self, x_t, t, class_index, **kwargs):
        return self.backbone.forward(x_t, t, class_index, adapters=self.active, **kwargs)


# -- binary container ----------------------------------------------------------

def _write_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_entry(buf, layer_id: str, role: str, arr) -> None:
    _write_str(buf, layer_id)
    _write_str(buf, role)
    if isinstance(arr, str):
        raw = arr.encode("utf-8")
        buf.write(struct.pack("<BB", _TEXT, 1))
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        return
    arr = np.asarray(arr)
    tag = 1 if arr.dtype == np.float64 else 0
    buf.write(struct.pack("<BB", tag, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def write_container(path, section: int, fingerprint: bytes, name: str, entries) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HB", VERSION, section))
    if len(fingerprint) != 32:
        raise ValueError("fingerprint must be 32 bytes")
    buf.write(fingerprint)
    _write_str(buf, name)
    entries = list(entries)
    buf.write(struct.pack("<I", len(entries)))
    for layer_id, role, arr in entries:
        _write_entry(buf, layer_id, role, arr)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("invalid UTF-8 string") from exc


def read_container(path, expect_section: int | None = None):
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not an AFNR file")
    version, section = r.unpack("<HB")
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, expected {VERSION}")
    if expect_section is not None and section != expect_section:
        raise FormatError(f"{path}: section {section}, expected {expect_section}")
    fingerprint = r.take(32)
    name = r.string()
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        layer_id = r.string()
        role = r.string()
        tag, ndim = r.unpack("<BB")
        if tag == _TEXT:
            (n,) = r.unpack("<I")
            entries.append((layer_id, role, r.take(n).decode("utf-8")))
            continue
        if tag not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        entries.append((layer_id, role, arr))
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return section, fingerprint, name, entries


def save_adapter(adapter_set: AdapterSet, path) -> None:
    entries = []
    for key, t in adapter_set.tensors().items():
        layer_id, role = key.rsplit("/", 1)
        entries.append((layer_id, role, t.data))
    entries.append(("__meta__", "method", adapter_set.method))
    write_container(path, SECTION_ADAPTER, adapter_set.backbone_fingerprint, adapter_set.task_name, entries)


def load_adapter(path, backbone: Backbone | None = None) -> AdapterSet:
    """Read an adapter file; when ``backbone`` is given the fingerprint must match."""
    _, fingerprint, name, entries = read_container(path, SECTION_ADAPTER)
    grouped: dict[str, dict[str, np.ndarray]] = {}
    method = "affiner"
    for layer_id, role, arr in entries:
        if layer_id == "__meta__":
            method = arr
            continue
        grouped.setdefault(layer_id, {})[role] = arr
    t = lambda arr: Tensor(arr, requires_grad=True, dtype=arr.dtype)  # noqa: E731
    rows = gate = proj = None
    if "classes" in grouped:
        rows = t(grouped.pop("classes")["rows"])
    if "cond" in grouped:
        c = grouped.pop("cond")
        gate, proj = t(c["gate"]), t(c["proj"])
    params = {}
    for layer_id, roles in grouped.items():
        if set(roles) == set(AFFINER_GROUPS):
            params[layer_id] = AffinerParams(**{g: t(roles[g]) for g in AFFINER_GROUPS})
        elif set(roles) == {"A", "B"}:
            params[layer_id] = LoraParams(t(roles["A"]), t(roles["B"]))
        elif set(roles) == {"delta_b"}:
            params[layer_id] = BiasOnlyParams(t(roles["delta_b"]))
        else:
            raise FormatError(f"{path}: entry {layer_id!r} has unrecognised roles {sorted(roles)}")
    s = AdapterSet(name, fingerprint, params, rows, gate, proj, method, "file")
    if backbone is not None:
        s.check_bound(backbone)
    return s


def save_checkpoint(backbone: Backbone, path) -> bytes:
    fp = backbone.fingerprint()
    entries = [("__arch__", "arch", backbone.arch.to_text())]
    entries += [(name, "param", t.data) for name, t in backbone.parameters().items()]
    write_container(path, SECTION_BACKBONE, fp, "backbone", entries)
    return fp


def load_checkpoint(path) -> Backbone:
    _, fingerprint, _, entries = read_container(path, SECTION_BACKBONE)
    arch_text = next((arr for lid, role, arr in entries if lid == "__arch__"), None)
    if arch_text is None:
        raise FormatError(f"{path}: checkpoint has no architecture record")
    backbone = build_backbone(ArchConfig.parse(arch_text, f"{path}#arch"), seed=0)
    params = backbone.parameters()
    for name, role, arr in entries:
        if name == "__arch__":
            continue
        if name not in params or params[name].shape != arr.shape:
            raise FormatError(f"{path}: parameter {name!r} does not fit the architecture")
        params[name].data = np.array(arr, dtype=params[name].dtype)
    if backbone.fingerprint() != fingerprint:
        raise FingerprintMismatchError(f"{path}: stored fingerprint does not match weights")
    return backbone
