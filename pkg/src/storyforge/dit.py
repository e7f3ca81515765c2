"""A toy diffusion transformer with full attention over text and visual tokens.

The model runs pre-norm transformer blocks over the concatenation of one text
segment per plan condition and all visual latent tokens, applying the
region-routing mask at every attention layer and region-bound low-rank
adapters at the q/k/v projections and the final feed-forward layer of each
block.  The backbone is frozen; gradients exist only for adapter parameters,
via the tape in :mod:`storyforge.autodiff`.  Captions are tokenized by
hashing whitespace-split words, which is deterministic and good enough for
routing experiments.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionMask, SegmentLayout, build_attention_mask
from .lora import AdapterSet, binding_token_mask
from .plan import LatentPlan
from .regions import LatentGrid, RegionMap

__all__ = [
    "ModelConfig",
    "NoiseSchedule",
    "TrainBatch",
    "ToyDiT",
    "Conditioning",
    "ShapeMismatch",
    "MaskMismatch",
    "TimestepOutOfRange",
    "tokenize",
    "add_noise",
    "dit_forward",
    "sample",
    "make_adapter_params",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeMismatch(ValueError):
    pass


class MaskMismatch(ValueError):
    pass


class TimestepOutOfRange(IndexError):
    pass


# ---------------------------------------------------------------------------
# Config, schedule, batch
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    grid: LatentGrid = LatentGrid(12, 4, 4)
    d_latent: int = 4
    ffn_mult: int = 4
    max_seg_len: int = 16
    hash_vocab: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def ffn_hidden(self) -> int:
        return self.d_model * self.ffn_mult

    def site_dims(self, site: str) -> tuple[int, int]:
        """(output, input) dimensions of an adapter injection site."""
        if site in ("q", "k", "v"):
            return (self.d_model, self.d_model)
        if site == "ffn":
            return (self.d_model, self.ffn_hidden)
        raise ValueError(f"unknown injection site {site!r}")


class NoiseSchedule:
    """Linear-variance forward process; ``alpha_bar`` is the cumulative
    product of (1 - beta_t), strictly decreasing and starting near 1."""

    def __init__(self, timesteps: int = 100, beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        if timesteps < 1:
            raise ValueError("need at least one timestep")
        self.timesteps = timesteps
        self.betas = np.linspace(beta_start, beta_end, timesteps)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)


@dataclass
class TrainBatch:
    z0: np.ndarray       # (V, d_latent) clean latent
    prompt: str
    epsilon: np.ndarray  # same shape as z0
    t: int


def add_noise(z0: np.ndarray, t: int, epsilon: np.ndarray,
              schedule: NoiseSchedule) -> np.ndarray:
    """Forward process: ``sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) epsilon``."""
    if not 0 <= t < schedule.timesteps:
        raise TimestepOutOfRange(f"t={t} outside [0, {schedule.timesteps})")
    if np.shape(z0) != np.shape(epsilon):
        raise ShapeMismatch(f"z0 {np.shape(z0)} vs epsilon {np.shape(epsilon)}")
    a = schedule.alpha_bar[t]
    return np.sqrt(a) * np.asarray(z0) + np.sqrt(1.0 - a) * np.asarray(epsilon)


# ---------------------------------------------------------------------------
# Tokenizer and embeddings
# ---------------------------------------------------------------------------


def _fnv1a(text: str) -> int:
    h = 2166136261
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 16777619) & 0xFFFFFFFF
    return h


def tokenize(caption: str, hash_vocab: int, max_seg_len: int) -> list[int]:
    """Hash whitespace-split words into the vocabulary, truncated."""
    words = caption.split()
    if not words:
        raise ValueError("cannot tokenize an empty caption")
    return [_fnv1a(w) % hash_vocab for w in words[:max_seg_len]]


def _sinusoid_table(n_positions: int, d: int) -> np.ndarray:
    table = np.zeros((n_positions, d))
    position = np.arange(n_positions)[:, None]
    for i in range(0, d, 2):
        freq = 1.0 / (10000.0 ** (i / d))
        table[:, i] = np.sin(position[:, 0] * freq)
        if i + 1 < d:
            table[:, i + 1] = np.cos(position[:, 0] * freq)
    return table


# ---------------------------------------------------------------------------
# Conditioning: everything derived from (plan, region map, mask mode)
# ---------------------------------------------------------------------------


@dataclass
class Conditioning:
    layout: SegmentLayout
    mask: AttentionMask
    mask_dense: np.ndarray
    token_ids: list[list[int]]
    region_map: RegionMap
    _adapter_masks: dict = field(default_factory=dict)

    def adapter_mask(self, condition_id: int | None) -> np.ndarray:
        if condition_id not in self._adapter_masks:
            self._adapter_masks[condition_id] = binding_token_mask(
                self.region_map, condition_id, self.layout.text_total)
        return self._adapter_masks[condition_id]


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------


class ToyDiT:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, ad.Tensor] = {}
        rng = np.random.default_rng(config.seed)
        d, h = config.d_model, config.ffn_hidden

        def weight(name, shape):
            # fan-in scaled so activations stay O(1) at toy widths
            std = 1.0 / np.sqrt(shape[-1])
            self.params[name] = ad.constant(rng.normal(0.0, std, size=shape))

        def norm(name):
            self.params[f"{name}.gamma"] = ad.constant(np.ones(d))
            self.params[f"{name}.beta"] = ad.constant(np.zeros(d))

        weight("tok_embed", (config.hash_vocab, d))
        weight("in_proj.w", (d, config.d_latent))
        self.params["in_proj.b"] = ad.constant(np.zeros(d))
        for b in range(config.n_blocks):
            norm(f"blocks.{b}.norm1")
            for site in ("wq", "wk", "wv", "wo"):
                weight(f"blocks.{b}.attn.{site}", (d, d))
            norm(f"blocks.{b}.norm2")
            weight(f"blocks.{b}.ffn.w1", (h, d))
            self.params[f"blocks.{b}.ffn.b1"] = ad.constant(np.zeros(h))
            weight(f"blocks.{b}.ffn.w2", (d, h))
            self.params[f"blocks.{b}.ffn.b2"] = ad.constant(np.zeros(d))
        norm("final_norm")
        weight("out_proj.w", (config.d_latent, d))
        self.params["out_proj.b"] = ad.constant(np.zeros(config.d_latent))

        self._seg_pos = _sinusoid_table(config.max_seg_len, d)
        self._vis_pos = _sinusoid_table(config.grid.tokens, d)

    # -- informational -----------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def backbone_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(self.params[name].data.tobytes())
        return digest.hexdigest()

    # -- conditioning --------------------------------------------------------

    def prepare(self, latent_plan: LatentPlan, region_map: RegionMap,
                mask_mode: str = "sr3a") -> Conditioning:
        """Tokenize the plan conditions and build the shared attention mask."""
        cfg = self.config
        if region_map.grid != cfg.grid:
            raise MaskMismatch(
                f"region map grid {region_map.grid} differs from model grid {cfg.grid}")
        if region_map.n_conditions != latent_plan.n_conditions:
            raise MaskMismatch(
                f"region map has {region_map.n_conditions} conditions, "
                f"plan has {latent_plan.n_conditions}")
        conditions = sorted(latent_plan.conditions, key=lambda c: c.id)
        token_ids = [tokenize(c.caption, cfg.hash_vocab, cfg.max_seg_len)
                     for c in conditions]
        layout = SegmentLayout(
            seg_lengths=tuple(len(ids) for ids in token_ids),
            visual_tokens=cfg.grid.tokens,
        )
        mask = build_attention_mask(layout, region_map, mask_mode)
        return Conditioning(layout=layout, mask=mask, mask_dense=mask.to_dense(),
                            token_ids=token_ids, region_map=region_map)

    # -- forward -------------------------------------------------------------

    def forward(self, cond: Conditioning, adapters: AdapterSet | None,
                z_t: np.ndarray, t: int,
                adapter_params: dict | None = None,
                capture_attention: list | None = None) -> ad.Tensor:
        """Predict the noise at the visual positions; returns a tape tensor.

        When ``capture_attention`` is a list, the per-head attention weight
        matrices are appended to it for inspection.
        """
        cfg = self.config
        v = cfg.grid.tokens
        if np.shape(z_t) != (v, cfg.d_latent):
            raise ShapeMismatch(
                f"z_t has shape {np.shape(z_t)}, expected {(v, cfg.d_latent)}")
        text_total = cond.layout.text_total

        embed = self.params["tok_embed"].data
        text_np = np.concatenate([
            embed[ids] + self._seg_pos[: len(ids)] for ids in cond.token_ids
        ])
        time_emb = _time_embedding(t, cfg.d_model)
        visual_np = (np.asarray(z_t, dtype=np.float64) @ self.params["in_proj.w"].data.T
                     + self.params["in_proj.b"].data + self._vis_pos + time_emb)
        x = ad.constant(np.concatenate([text_np, visual_np]))

        adapters = adapters or AdapterSet()
        entry_index = {id(e): i for i, e in enumerate(adapters.entries)}

        def lora_factors(entry):
            if adapter_params is not None:
                return adapter_params[entry_index[id(entry)]]
            return ad.constant(entry.lora.down), ad.constant(entry.lora.up)

        def linear(h, w_name, b_name=None, block=None, site=None):
            w = self.params[w_name]
            y = ad.matmul(h, ad.transpose(w))
            if b_name is not None:
                y = y + self.params[b_name]
            if block is not None:
                for entry in adapters.at(block, site):
                    down, up = lora_factors(entry)
                    masked = ad.mul_mask_rows(h, cond.adapter_mask(entry.condition_id))
                    delta = ad.matmul(ad.matmul(masked, ad.transpose(down)),
                                      ad.transpose(up))
                    y = y + delta * entry.lora.scale
            return y

        n_heads = cfg.n_heads
        d_head = cfg.d_model // n_heads
        scale = 1.0 / np.sqrt(d_head)
        for b in range(cfg.n_blocks):
            h = ad.layernorm(x, self.params[f"blocks.{b}.norm1.gamma"],
                             self.params[f"blocks.{b}.norm1.beta"])
            q = linear(h, f"blocks.{b}.attn.wq", block=b, site="q")
            k = linear(h, f"blocks.{b}.attn.wk", block=b, site="k")
            val = linear(h, f"blocks.{b}.attn.wv", block=b, site="v")
            head_outputs = []
            for head in range(n_heads):
                lo, hi = head * d_head, (head + 1) * d_head
                qh, kh, vh = (ad.cols(m, lo, hi) for m in (q, k, val))
                logits = ad.matmul(qh, ad.transpose(kh)) * scale
                weights = ad.masked_softmax(logits, cond.mask_dense)
                if capture_attention is not None:
                    capture_attention.append(weights.data)
                head_outputs.append(ad.matmul(weights, vh))
            attn = linear(ad.concat_cols(head_outputs), f"blocks.{b}.attn.wo")
            x = x + attn
            h2 = ad.layernorm(x, self.params[f"blocks.{b}.norm2.gamma"],
                              self.params[f"blocks.{b}.norm2.beta"])
            hidden = ad.gelu(linear(h2, f"blocks.{b}.ffn.w1", f"blocks.{b}.ffn.b1"))
            out = linear(hidden, f"blocks.{b}.ffn.w2", f"blocks.{b}.ffn.b2",
                         block=b, site="ffn")
            x = x + out

        visual = ad.rows(x, text_total, text_total + v)
        normed = ad.layernorm(visual, self.params["final_norm.gamma"],
                              self.params["final_norm.beta"])
        return ad.matmul(normed, ad.transpose(self.params["out_proj.w"])) \
            + self.params["out_proj.b"]


def _time_embedding(t: int, d: int) -> np.ndarray:
    out = np.zeros(d)
    for i in range(0, d, 2):
        freq = 1.0 / (10000.0 ** (i / d))
        out[i] = np.sin(t * freq)
        if i + 1 < d:
            out[i + 1] = np.cos(t * freq)
    return out


def make_adapter_params(adapters: AdapterSet, trainable: bool = True) -> dict:
    """Tape tensors aliasing the adapter factor arrays, keyed by entry index.

    The tensors share memory with the adapter matrices, so in-place optimizer
    updates keep the :class:`AdapterSet` current.
    """
    params = {}
    for i, e in enumerate(adapters.entries):
        e.lora.down = np.ascontiguousarray(e.lora.down, dtype=np.float64)
        e.lora.up = np.ascontiguousarray(e.lora.up, dtype=np.float64)
        params[i] = (ad.Tensor(e.lora.down, requires_grad=trainable),
                     ad.Tensor(e.lora.up, requires_grad=trainable))
    return params


def dit_forward(model: ToyDiT, latent_plan: LatentPlan, region_map: RegionMap,
                mask_mode: str, lora_set: AdapterSet | None,
                z_t: np.ndarray, t: int) -> np.ndarray:
    """One conditioned forward pass; returns the predicted noise array."""
    cond = model.prepare(latent_plan, region_map, mask_mode)
    return model.forward(cond, lora_set, z_t, t).data


def sample(model: ToyDiT, latent_plan: LatentPlan, region_map: RegionMap,
           schedule: NoiseSchedule, seed: int, mask_mode: str = "sr3a",
           adapters: AdapterSet | None = None,
           inference_filter: bool = True) -> np.ndarray:
    """Ancestral denoising from pure noise; deterministic given the seed.

    By default adapters are filtered to their inference subset (per-video
    spatial motion adapters are dropped); pass ``inference_filter=False`` to
    sample with the full trained set, e.g. for overfit reconstruction checks.
    """
    cfg = model.config
    if adapters is not None and inference_filter:
        adapters = adapters.inference_only()
    cond = model.prepare(latent_plan, region_map, mask_mode)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((cfg.grid.tokens, cfg.d_latent))
    for t in range(schedule.timesteps - 1, -1, -1):
        eps_hat = model.forward(cond, adapters, z, t).data
        alpha = schedule.alphas[t]
        a_bar = schedule.alpha_bar[t]
        mean = (z - schedule.betas[t] / np.sqrt(1.0 - a_bar) * eps_hat) / np.sqrt(alpha)
        if t > 0:
            a_bar_prev = schedule.alpha_bar[t - 1]
            sigma = np.sqrt((1.0 - a_bar_prev) / (1.0 - a_bar) * schedule.betas[t])
            z = mean + sigma * rng.standard_normal(z.shape)
        else:
            z = mean
    return z


# ---------------------------------------------------------------------------
# Checkpoints: JSON header line + raw little-endian float32 blob
# ---------------------------------------------------------------------------


def save_checkpoint(model: ToyDiT) -> bytes:
    cfg = model.config
    manifest = []
    blob = bytearray()
    for name, tensor in model.params.items():
        manifest.append({"name": name, "shape": list(tensor.data.shape),
                         "offset": len(blob)})
        blob += tensor.data.astype("<f4").tobytes()
    header = {
        "config": {
            "d_model": cfg.d_model, "n_blocks": cfg.n_blocks,
            "n_heads": cfg.n_heads, "d_latent": cfg.d_latent,
            "ffn_mult": cfg.ffn_mult, "max_seg_len": cfg.max_seg_len,
            "hash_vocab": cfg.hash_vocab, "seed": cfg.seed,
            "grid": {"t": cfg.grid.t_lat, "h": cfg.grid.h_lat,
                     "w": cfg.grid.w_lat},
        },
        "params": manifest,
    }
    return json.dumps(header).encode("ascii") + b"\n" + bytes(blob)


def load_checkpoint(data: bytes) -> ToyDiT:
    newline = data.index(b"\n")
    header = json.loads(data[:newline])
    c = header["config"]
    config = ModelConfig(
        d_model=c["d_model"], n_blocks=c["n_blocks"], n_heads=c["n_heads"],
        grid=LatentGrid(c["grid"]["t"], c["grid"]["h"], c["grid"]["w"]),
        d_latent=c["d_latent"], ffn_mult=c["ffn_mult"],
        max_seg_len=c["max_seg_len"], hash_vocab=c["hash_vocab"], seed=c["seed"],
    )
    model = ToyDiT(config)
    blob = data[newline + 1:]
    for item in header["params"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = item["offset"]
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        model.params[item["name"]] = ad.constant(values.reshape(shape).astype(np.float64))
    return model
