"""Encoder, query selection, decoder and prediction heads.

The encoder uses local windowed self-attention (each frame sees the 2W+1
frames around it); the decoder attends densely from Q queries to all T
memory tokens.  Both are linear in T.

Queries travel as two streams, action and position.  Attention logits are
computed from the sum of the streams, while each stream keeps its own value
and output projections so the decoder emits distinct action and position
features.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .sets import PredictionSet


class ConfigError(ValueError):
    """A configuration field violates its invariant."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not fit the model."""


@dataclass(frozen=True)
class ModelConfig:
    T: int = 128
    C_in: int = 16
    C: int = 64
    heads: int = 4
    L_enc: int = 2
    L_dec: int = 2
    Q: int = 16
    W: int = 16
    alpha: float = 0.2
    use_daq: bool = True
    use_icl: bool = True
    ffn_mult: int = 2
    head_layers: int = 3

    def __post_init__(self) -> None:
        for name in ("T", "C_in", "C", "heads", "L_enc", "L_dec", "Q", "W", "ffn_mult", "head_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.C % self.heads:
            raise ConfigError("heads", f"C={self.C} is not divisible by heads={self.heads}")
        if self.Q > self.T:
            raise ConfigError("Q", f"Q={self.Q} exceeds T={self.T}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha", "must lie in (0, 1)")

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls(T=512, C_in=512, C=512, heads=8, L_enc=2, L_dec=4, Q=40, W=16, alpha=0.2)

    @property
    def head_dim(self) -> int:
        return self.C // self.heads

    @property
    def window(self) -> int:
        """Effective half-window; beyond T - 1 every frame already sees the whole sequence."""
        return min(self.W, self.T - 1)


@dataclass
class HeadOutput:
    """Batched predictions of the shared heads: tensors of shape (B, N)."""

    probs: Tensor
    midpoints: Tensor
    durations: Tensor
    layer_tag: str
    head_params: tuple[Tensor, ...] = ()
    mid_logit: Tensor | None = None

    def to_sets(self) -> list[PredictionSet]:
        return [
            PredictionSet(self.probs.data[b], self.midpoints.data[b], self.durations.data[b], self.layer_tag)
            for b in range(self.probs.shape[0])
        ]


@dataclass
class EncoderOutput:
    act: Tensor
    pos: Tensor


@dataclass
class ModelOutput:
    final: HeadOutput
    decoder_aux: list[HeadOutput]
    encoder_aux: HeadOutput
    final_act: Tensor
    selected: np.ndarray
    decoder_layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    @property
    def all_sets(self) -> list[HeadOutput]:
        return [self.final, *self.decoder_aux, self.encoder_aux]


def sinusoidal_encoding(t: int, c: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(c)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / c)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    lead = x.shape[:-1]
    y = ad.matmul(x.reshape(-1, x.shape[-1]), w)
    if b is not None:
        y = ad.add_bias(y, b)
    return y.reshape(lead + (w.shape[1],))


def count_above(probs, alpha: float) -> int:
    """Number of queries whose repetitive-class probability exceeds ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"alpha={alpha} must lie in (0, 1)")
    return int(np.sum(np.asarray(probs) > alpha))


class QueryModel:
    """Query-based repetition counter.  Parameters live in ``self.params`` (name -> Tensor)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        self._rng = None
        self._pe = sinusoidal_encoding(config.T, config.C)
        self._mask = ad.local_window_mask(config.T, config.window)[None, None]

    # -- parameter construction ----------------------------------------------------

    def _linear_params(self, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        bound = math.sqrt(1.0 / fan_in)
        self.params[f"{name}.w"] = Tensor(self._rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True, name=f"{name}.w")
        if bias:
            self.params[f"{name}.b"] = Tensor(self._rng.uniform(-bound, bound, fan_out), requires_grad=True, name=f"{name}.b")

    def _norm_params(self, name: str) -> None:
        c = self.config.C
        self.params[f"{name}.g"] = Tensor(np.ones(c), requires_grad=True, name=f"{name}.g")
        self.params[f"{name}.b"] = Tensor(np.zeros(c), requires_grad=True, name=f"{name}.b")

    def _build(self) -> None:
        cfg = self.config
        c, f = cfg.C, cfg.C * cfg.ffn_mult
        self._linear_params("embed", cfg.C_in, c)
        for l in range(cfg.L_enc):
            p = f"enc{l}"
            for n in ("q", "k", "v", "o"):
                self._linear_params(f"{p}.attn.{n}", c, c)
            self._norm_params(f"{p}.norm1")
            self._linear_params(f"{p}.ffn1", c, f)
            self._linear_params(f"{p}.ffn2", f, c)
            self._norm_params(f"{p}.norm2")
        self._linear_params("enc_out.act", c, c)
        self._linear_params("enc_out.pos", c, c)
        for head, out in (("act_head", 2), ("pos_head", 2)):
            for i in range(cfg.head_layers):
                self._linear_params(f"{head}.{i}", c, out if i == cfg.head_layers - 1 else c)
        self.params["query_pos"] = Tensor(self._rng.normal(0.0, 1.0, (cfg.Q, c)), requires_grad=True, name="query_pos")
        if not cfg.use_daq:
            self.params["query_act"] = Tensor(self._rng.normal(0.0, 1.0, (cfg.Q, c)), requires_grad=True, name="query_act")
        for l in range(cfg.L_dec):
            p = f"dec{l}"
            for block in ("self", "cross"):
                for n in ("q", "k", "v_act", "v_pos", "o_act", "o_pos"):
                    self._linear_params(f"{p}.{block}.{n}", c, c)
                self._norm_params(f"{p}.{block}.norm_act")
                self._norm_params(f"{p}.{block}.norm_pos")
            for stream in ("act", "pos"):
                self._linear_params(f"{p}.ffn_{stream}1", c, f)
                self._linear_params(f"{p}.ffn_{stream}2", f, c)
                self._norm_params(f"{p}.ffn_norm_{stream}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def head_parameters(self) -> tuple[Tensor, ...]:
        return tuple(v for k, v in self.params.items() if k.startswith(("act_head.", "pos_head.")))

    # -- building blocks ---------------------------------------------------------------

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return linear(x, self.params[f"{name}.w"], self.params.get(f"{name}.b"))

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.config.heads, self.config.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: Tensor) -> Tensor:
        b, h, n, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        return self._lin(ad.gelu(self._lin(x, f"{name}1")), f"{name}2")

    # -- pipeline stages -----------------------------------------------------------------

    def embed_input(self, features) -> Tensor:
        cfg = self.config
        x = Tensor(features) if not isinstance(features, Tensor) else features
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[2] != cfg.C_in or x.shape[1] != cfg.T:
            raise ContractError(f"expected input of shape (B, {cfg.T}, {cfg.C_in}), got {x.shape}")
        pe = Tensor(np.broadcast_to(self._pe, (x.shape[0], cfg.T, cfg.C)).copy())
        return self._lin(x, "embed") + pe

    def _encoder_layer(self, x: Tensor, l: int) -> Tensor:
        cfg = self.config
        p = f"enc{l}"
        w = cfg.window
        q = ad.scale(self._split(self._lin(x, f"{p}.attn.q")), 1.0 / math.sqrt(cfg.head_dim))
        k = self._split(self._lin(x, f"{p}.attn.k"))
        v = self._split(self._lin(x, f"{p}.attn.v"))
        attn = ad.softmax(ad.local_scores(q, k, w), axis=-1, mask=self._mask)
        o = self._lin(self._merge(ad.local_mix(attn, v, w)), f"{p}.attn.o")
        x = self._norm(x + o, f"{p}.norm1")
        return self._norm(x + self._ffn(x, f"{p}.ffn"), f"{p}.norm2")

    def encode(self, embedded: Tensor) -> EncoderOutput:
        x = embedded
        for l in range(self.config.L_enc):
            x = self._encoder_layer(x, l)
        return EncoderOutput(self._lin(x, "enc_out.act"), self._lin(x, "enc_out.pos"))

    def _mlp(self, x: Tensor, head: str) -> Tensor:
        n = self.config.head_layers
        for i in range(n):
            x = self._lin(x, f"{head}.{i}")
            if i < n - 1:
                x = ad.gelu(x)
        return x

    def frame_logits(self, batch: int) -> Tensor:
        """Logit of every frame centre in normalised time, shape (B, T)."""
        t = self.config.T
        centre = (np.arange(t) + 0.5) / t
        return Tensor(np.broadcast_to(np.log(centre) - np.log1p(-centre), (batch, t)).copy())

    def predict_heads(self, act: Tensor, pos: Tensor, ref_logit: Tensor, tag: str = "final") -> HeadOutput:
        """Class probability from action features, (m, d) from position features.

        The midpoint is an offset in logit space around the reference ``ref_logit``.
        """
        probs = ad.softmax(self._mlp(act, "act_head"), axis=-1)[..., 1]
        raw = self._mlp(pos, "pos_head")
        mid_logit = raw[..., 0] + ref_logit
        floor = 1.0 / self.config.T
        dur = ad.scale(ad.sigmoid(raw[..., 1]), 1.0 - floor) + floor
        return HeadOutput(probs, ad.sigmoid(mid_logit), dur, tag, self.head_parameters(), mid_logit)

    def select_queries(self, enc: EncoderOutput) -> tuple[Tensor, Tensor, HeadOutput, np.ndarray]:
        """Score every encoder token and keep the Q most confident (ties: earlier frame first)."""
        aux = self.predict_heads(enc.act, enc.pos, self.frame_logits(enc.act.shape[0]), tag="encoder")
        order = np.argsort(-aux.probs.data, axis=1, kind="stable")[:, : self.config.Q]
        return ad.gather_rows(enc.act, order), ad.gather_rows(enc.pos, order), aux, order

    def _attend(self, qa: Tensor, qp: Tensor, ka: Tensor, kp: Tensor, p: str) -> tuple[Tensor, Tensor]:
        dh = self.config.head_dim
        q = ad.scale(self._split(self._lin(qa + qp, f"{p}.q")), 1.0 / math.sqrt(dh))
        k = self._split(self._lin(ka + kp, f"{p}.k"))
        va = self._split(self._lin(ka, f"{p}.v_act"))
        vp = self._split(self._lin(kp, f"{p}.v_pos"))
        attn = ad.softmax(ad.matmul(q, k.transpose(0, 1, 3, 2)), axis=-1)
        oa = self._lin(self._merge(ad.matmul(attn, va)), f"{p}.o_act")
        op = self._lin(self._merge(ad.matmul(attn, vp)), f"{p}.o_pos")
        return self._norm(qa + oa, f"{p}.norm_act"), self._norm(qp + op, f"{p}.norm_pos")

    def initial_queries(self, e_act: Tensor, batch: int) -> tuple[Tensor, Tensor]:
        qp = ad.tile_batch(self.params["query_pos"], batch)
        qa = e_act if self.config.use_daq else ad.tile_batch(self.params["query_act"], batch)
        return qa, qp

    def decode(self, e_act: Tensor, e_pos: Tensor, memory: EncoderOutput) -> list[tuple[Tensor, Tensor]]:
        qa, qp = self.initial_queries(e_act, memory.act.shape[0])
        layers = []
        for l in range(self.config.L_dec):
            p = f"dec{l}"
            qa, qp = self._attend(qa, qp, qa, qp, f"{p}.self")
            qa, qp = self._attend(qa, qp, memory.act, memory.pos, f"{p}.cross")
            qa = self._norm(qa + self._ffn(qa, f"{p}.ffn_act"), f"{p}.ffn_norm_act")
            qp = self._norm(qp + self._ffn(qp, f"{p}.ffn_pos"), f"{p}.ffn_norm_pos")
            layers.append((qa, qp))
        return layers

    def forward(self, features) -> ModelOutput:
        enc = self.encode(self.embed_input(features))
        e_act, e_pos, enc_aux, order = self.select_queries(enc)
        # each query is anchored at the midpoint proposed for its selected token
        b, t = enc_aux.mid_logit.shape
        ref = ad.gather_rows(enc_aux.mid_logit.reshape(b, t, 1), order).reshape(b, order.shape[1])
        layers = self.decode(e_act, e_pos, enc)
        preds = [self.predict_heads(a, p, ref, tag=f"decoder{l}") for l, (a, p) in enumerate(layers)]
        return ModelOutput(
            final=preds[-1],
            decoder_aux=preds[:-1],
            encoder_aux=enc_aux,
            final_act=layers[-1][0],
            selected=order,
            decoder_layers=layers,
        )

    __call__ = forward

    def predict_probs(self, features, batch_size: int = 32) -> np.ndarray:
        """Final-layer repetitive probabilities, shape (N, Q), without recording a graph."""
        features = np.asarray(features)
        out = []
        with ad.no_grad():
            for i in range(0, len(features), batch_size):
                out.append(self.forward(features[i : i + batch_size]).final.probs.data.copy())
        return np.concatenate(out) if out else np.zeros((0, self.config.Q))

    # -- persistence -----------------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise CheckpointError("parameter names do not match the model")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v


CHECKPOINT_MAGIC = b"TRCKPT01"


def save_checkpoint(model: QueryModel, path, step: int = 0, state: dict[str, np.ndarray] | None = None) -> None:
    """Write manifest (config, names, shapes, step) followed by little-endian float64 parameters."""
    state = model.state() if state is None else state
    names = list(model.params)
    manifest = {
        "config": asdict(model.config),
        "step": int(step),
        "params": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(state[n], dtype="<f8").tobytes() for n in names)
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(header)) + header + blob)


def load_checkpoint(path) -> tuple[QueryModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    model = QueryModel(ModelConfig(**manifest["config"]))
    offset = 16 + hlen
    state = {}
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = raw[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated parameter blob")
        state[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after parameter blob")
    model.load_state(state)
    return model, manifest
