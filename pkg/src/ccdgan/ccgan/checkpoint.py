"""
Training snapshots and their binary container.

Layout: 4-byte magic, version byte, uint32 length of a UTF-8 key-value
text block, the text block, then raw little-endian float64 arrays in
the order the text block declares them (``array <name> <d0>x<d1>...``).
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import CorruptFile, MissingArtifact
from .nets import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .optim import AdamState, SpectralState

MAGIC = b"CCGK"
VERSION = 1
_PREFIX = struct.Struct("<4sBI")


@dataclass
class Checkpoint:
    gen_config: GeneratorConfig
    gen_params: dict
    gen_buffers: dict
    gen_sn: dict
    disc_config: DiscriminatorConfig
    disc_params: dict
    opt_g: AdamState
    opt_d: AdamState
    iteration: int
    loss_history: np.ndarray
    rng_state: str
    lr: float
    meta: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, gen: Generator, disc: Discriminator, opt_g: AdamState, opt_d: AdamState,
                iteration: int, loss_history, rng: np.random.Generator, lr: float,
                meta: Optional[dict] = None) -> "Checkpoint":
        return cls(
            gen.cfg,
            {k: v.copy() for k, v in gen.params.items()},
            {k: v.copy() for k, v in gen.buffers.items()},
            copy.deepcopy(gen.sn),
            disc.cfg,
            {k: v.copy() for k, v in disc.params.items()},
            copy.deepcopy(opt_g),
            copy.deepcopy(opt_d),
            int(iteration),
            np.array(loss_history, dtype=np.float64).reshape(-1, 2),
            json.dumps(rng.bit_generator.state),
            float(lr),
            dict(meta or {}),
        )

    def generator(self) -> Generator:
        g = Generator(self.gen_config, init=False)
        g.params = {k: v.copy() for k, v in self.gen_params.items()}
        g.buffers = {k: v.copy() for k, v in self.gen_buffers.items()}
        g.sn = copy.deepcopy(self.gen_sn)
        return g

    def discriminator(self) -> Discriminator:
        d = Discriminator(self.disc_config, init=False)
        d.params = {k: v.copy() for k, v in self.disc_params.items()}
        return d


def _arrays(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = []
    out += [(f"g.param.{k}", v) for k, v in ck.gen_params.items()]
    out += [(f"g.buffer.{k}", v) for k, v in ck.gen_buffers.items()]
    for k, st in ck.gen_sn.items():
        out.append((f"g.sn_u.{k}", st.u))
        out.append((f"g.sn_v.{k}", st.v))
        out.append((f"g.sn_sigma.{k}", np.array(st.sigma)))
    out += [(f"d.param.{k}", v) for k, v in ck.disc_params.items()]
    for tag, st in (("opt_g", ck.opt_g), ("opt_d", ck.opt_d)):
        out += [(f"{tag}.m.{k}", v) for k, v in st.m.items()]
        out += [(f"{tag}.v.{k}", v) for k, v in st.v.items()]
    out.append(("loss_history", ck.loss_history))
    return out


def dumps(ck: Checkpoint) -> bytes:
    lines = [
        f"iteration = {ck.iteration}",
        f"lr = {ck.lr!r}",
        f"opt_g.t = {ck.opt_g.t}",
        f"opt_d.t = {ck.opt_d.t}",
        f"rng_state = {ck.rng_state}",
        f"meta = {json.dumps(ck.meta, sort_keys=True)}",
    ]
    lines += [f"generator.{k} = {json.dumps(v)}" for k, v in asdict(ck.gen_config).items()]
    lines += [f"discriminator.{k} = {json.dumps(v)}" for k, v in asdict(ck.disc_config).items()]
    arrays = _arrays(ck)
    for name, arr in arrays:
        dims = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"array {name} {dims}")
    text = ("\n".join(lines) + "\n").encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return _PREFIX.pack(MAGIC, VERSION, len(text)) + text + body


def _parse_config(cls, values: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in values.items() if k in names})


def loads(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CorruptFile("checkpoint truncated")
    magic, version, n_text = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFile("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CorruptFile(f"unsupported checkpoint version {version}")
    try:
        text = data[_PREFIX.size:_PREFIX.size + n_text].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptFile("checkpoint header is not UTF-8") from exc
    kv, gcfg, dcfg, decl = {}, {}, {}, []
    for line in text.splitlines():
        if line.startswith("array "):
            _, name, dims = line.split(" ")
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            decl.append((name, shape))
            continue
        key, _, value = line.partition(" = ")
        if key.startswith("generator."):
            gcfg[key[10:]] = json.loads(value)
        elif key.startswith("discriminator."):
            dcfg[key[14:]] = json.loads(value)
        else:
            kv[key] = value
    offset = _PREFIX.size + n_text
    arrays = {}
    for name, shape in decl:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CorruptFile("checkpoint payload truncated")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise CorruptFile("trailing bytes after checkpoint payload")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    sn = {k: SpectralState(u, group("g.sn_v.")[k], float(group("g.sn_sigma.")[k]))
          for k, u in group("g.sn_u.").items()}
    return Checkpoint(
        _parse_config(GeneratorConfig, gcfg),
        group("g.param."),
        group("g.buffer."),
        sn,
        _parse_config(DiscriminatorConfig, dcfg),
        group("d.param."),
        AdamState(group("opt_g.m."), group("opt_g.v."), int(kv["opt_g.t"])),
        AdamState(group("opt_d.m."), group("opt_d.v."), int(kv["opt_d.t"])),
        int(kv["iteration"]),
        arrays["loss_history"].reshape(-1, 2),
        kv["rng_state"],
        float(kv["lr"]),
        json.loads(kv.get("meta", "{}")),
    )


def save(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ck))


def load(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"checkpoint not found: {p}")
    return loads(p.read_bytes())
