"""The two-level attention forecaster.

One block: lay nodes out per subgraph, attend within each subgraph over
valid keys only, mean-pool each subgraph to a summary token, attend across
summaries, broadcast the refreshed summaries back, fuse with the local
representation through a 2D->D linear map, and add a block-level residual in
node order. Blocks are stacked over a coarsening partition series. All
sublayers are pre-norm with residuals; padded slots are re-zeroed after
every sublayer, so zero padding is an invariant of the whole block and
padded values can never leak into real nodes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, InputError, ShapeError
from .partition import PartitionPlan, ScaleSeries, apply_plan, revert_plan


@dataclass
class ModelConfig:
    n: int  # nodes
    t: int  # look-back steps
    c: int  # channels
    f: int  # horizon steps
    d_model: int
    l: int  # block count
    heads: int = 4
    p0: int = 8
    k_pe: int = 8
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} must be divisible by heads={self.heads}"
            )
        if self.f < 1 or self.t < 1 or self.l < 1:
            raise ConfigError("t, f, and l must all be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class AttnParams:
    """One attention+FFN branch: projections, FFN pair, two layer-norm sets."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ffn_w1: Tensor
    ffn_w2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


@dataclass
class SbaBlockParams:
    intra: AttnParams
    inter: AttnParams
    fuse: Tensor  # (2D, D)


@dataclass
class ModelParams:
    embed: Tensor  # (T*C, D)
    pe_proj: Tensor  # (k_pe, D)
    blocks: list
    head: Tensor  # (D, F*C)

    def named(self):
        """Yield (name, tensor) in manifest order; this order IS the format."""
        yield "embed", self.embed
        yield "pe_proj", self.pe_proj
        branch_fields = [
            "wq", "wk", "wv",
            "ln1_gamma", "ln1_beta",
            "ffn_w1", "ffn_w2",
            "ln2_gamma", "ln2_beta",
        ]
        for b, blk in enumerate(self.blocks):
            for side in ("intra", "inter"):
                prm = getattr(blk, side)
                for name in branch_fields:
                    yield f"block{b}.{side}.{name}", getattr(prm, name)
            yield f"block{b}.fuse", blk.fuse
        yield "head", self.head

    def tensors(self):
        return [t for _, t in self.named()]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def zero_grad(self):
        for t in self.tensors():
            t.grad = None

    def clone(self) -> "ModelParams":
        def cp(t):
            out = Tensor(t.data.copy(), requires_grad=True)
            return out

        def cp_branch(prm):
            return AttnParams(**{k: cp(v) for k, v in vars(prm).items()})

        return ModelParams(
            embed=cp(self.embed),
            pe_proj=cp(self.pe_proj),
            blocks=[
                SbaBlockParams(
                    intra=cp_branch(b.intra), inter=cp_branch(b.inter), fuse=cp(b.fuse)
                )
                for b in self.blocks
            ],
            head=cp(self.head),
        )


def expected_param_count(config: ModelConfig) -> int:
    """Closed-form manifest total; init and checkpoints are checked against it."""
    d = config.d_model
    branch = 3 * d * d + 2 * config.ffn_mult * d * d + 4 * d
    per_block = 2 * branch + 2 * d * d
    return (
        config.t * config.c * d
        + config.k_pe * d
        + config.l * per_block
        + d * config.f * config.c
    )


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) linear maps, unit layer norms."""
    rng = np.random.default_rng(seed)
    d = config.d_model

    def linear(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), True)

    def branch():
        return AttnParams(
            wq=linear(d, d),
            wk=linear(d, d),
            wv=linear(d, d),
            ln1_gamma=Tensor(np.ones(d), True),
            ln1_beta=Tensor(np.zeros(d), True),
            ffn_w1=linear(d, config.ffn_mult * d),
            ffn_w2=linear(config.ffn_mult * d, d),
            ln2_gamma=Tensor(np.ones(d), True),
            ln2_beta=Tensor(np.zeros(d), True),
        )

    params = ModelParams(
        embed=linear(config.t * config.c, d),
        pe_proj=linear(config.k_pe, d),
        blocks=[
            SbaBlockParams(intra=branch(), inter=branch(), fuse=linear(2 * d, d))
            for _ in range(config.l)
        ],
        head=linear(d, config.f * config.c),
    )
    if params.count() != expected_param_count(config):
        raise ContractError("parameter manifest disagrees with the closed form")
    return params


# ---------------------------------------------------------------------------
# forward graph


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., s, d) -> (..., heads, s, d/heads)."""
    s, d = x.shape[-2], x.shape[-1]
    out = ad.reshape(x, x.shape[:-1] + (heads, d // heads))
    return ad.swapaxes(out, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    out = ad.swapaxes(x, -2, -3)
    return ad.reshape(out, out.shape[:-2] + (out.shape[-2] * out.shape[-1],))


def attention_core(q: Tensor, k: Tensor, v: Tensor, valid=None):
    """softmax(q k^T / sqrt(d_head)) v over the last two axes.

    valid masks key positions (True = attend). Returns (output, weights);
    the weights rows over valid keys sum to one and masked keys are exact
    zeros. This is the only place attention FLOPs are spent, which is what
    the instrumented benchmark measures.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale)
    alpha = ad.masked_softmax(scores, valid)
    return ad.matmul(alpha, v), alpha


def _rezero(x: Tensor, valid: np.ndarray) -> Tensor:
    """Multiply padded rows by exact 0.0 (valid rows by 1.0, bit-preserving)."""
    return ad.mul(x, valid[..., None].astype(np.float64))


def _attn_sublayer(x: Tensor, prm: AttnParams, heads: int, key_valid=None):
    h = ad.layer_norm(x, prm.ln1_gamma, prm.ln1_beta)
    q = _split_heads(ad.matmul(h, prm.wq), heads)
    k = _split_heads(ad.matmul(h, prm.wk), heads)
    v = _split_heads(ad.matmul(h, prm.wv), heads)
    att, alpha = attention_core(q, k, v, key_valid)
    return ad.add(x, _merge_heads(att)), alpha


def _ffn_sublayer(x: Tensor, prm: AttnParams) -> Tensor:
    h = ad.layer_norm(x, prm.ln2_gamma, prm.ln2_beta)
    return ad.add(x, ad.matmul(ad.gelu(ad.matmul(h, prm.ffn_w1)), prm.ffn_w2))


def intra_attention(xp: Tensor, valid, prm: AttnParams, heads: int):
    """Per-subgraph self-attention over valid nodes; padded rows stay zero.

    xp is (..., p, m, d); valid is the (p, m) node validity table. Returns
    (y, alpha) with alpha shaped (..., p, heads, m, m).
    """
    valid = np.asarray(valid, dtype=bool)
    key_valid = valid[:, None, None, :]  # broadcast over heads and query rows
    u, alpha = _attn_sublayer(xp, prm, heads, key_valid)
    u = _rezero(u, valid)
    y = _rezero(_ffn_sublayer(u, prm), valid)
    return y, alpha


def pool_subgraphs(y: Tensor, valid) -> Tensor:
    """Masked mean over each subgraph's valid rows: (..., p, m, d) -> (..., p, d)."""
    return ad.masked_mean(y, np.asarray(valid, dtype=bool))


def inter_attention(s: Tensor, prm: AttnParams, heads: int):
    """Full self-attention across the p subgraph summaries, same wrapping as intra."""
    u, alpha = _attn_sublayer(s, prm, heads, None)
    return _ffn_sublayer(u, prm), alpha


def fuse(y: Tensor, s_prime: Tensor, w_fuse: Tensor, valid) -> Tensor:
    """Broadcast summaries along m, concat with local rows, map 2D -> D."""
    valid = np.asarray(valid, dtype=bool)
    m = y.shape[-2]
    sp = ad.reshape(s_prime, s_prime.shape[:-1] + (1, s_prime.shape[-1]))
    sp = ad.broadcast_to(sp, sp.shape[:-2] + (m, sp.shape[-1]))
    out = ad.matmul(ad.concat([y, sp], axis=-1), w_fuse)
    return _rezero(out, valid)


def sba_block(
    x: Tensor,
    plan: PartitionPlan,
    prm: SbaBlockParams,
    heads: int,
    capture: list | None = None,
) -> Tensor:
    """One block in node order: partition, attend, pool, exchange, fuse, residual."""
    xp = apply_plan(x, plan)
    y, alpha = intra_attention(xp, plan.mask, prm.intra, heads)
    s = pool_subgraphs(y, plan.mask)
    s2, alpha2 = inter_attention(s, prm.inter, heads)
    fused = fuse(y, s2, prm.fuse, plan.mask)
    if capture is not None:
        capture.append(_capture_block(alpha, alpha2, plan))
    return ad.add(revert_plan(fused, plan), x)


def _capture_block(alpha: Tensor, alpha2: Tensor, plan: PartitionPlan) -> dict:
    """Head-averaged attention maps at valid sizes, for dump/inspection."""
    a = alpha.data
    a2 = alpha2.data
    if a.ndim != 4:
        raise ContractError("attention capture expects a single unbatched window")
    a = a.mean(axis=1)  # (p, m, m) averaged over heads
    intra = []
    for sub in range(plan.p):
        size = int(plan.mask[sub].sum())
        intra.append(a[sub, :size, :size].copy())
    return {"intra": intra, "inter": a2.mean(axis=0).copy()}


def embed(x, params: ModelParams, pe_vectors) -> Tensor:
    """Flatten history to (..., n, t*c), map to width d, add projected encodings."""
    t = ad.as_tensor(x)
    if t.ndim < 3:
        raise ShapeError(f"embed expects (..., n, t, c), got {tuple(t.shape)}")
    flat = ad.reshape(t, t.shape[:-2] + (t.shape[-2] * t.shape[-1],))
    if flat.shape[-1] != params.embed.shape[0]:
        raise ShapeError(
            f"history width {flat.shape[-1]} does not match embedding "
            f"{tuple(params.embed.shape)}"
        )
    base = ad.matmul(flat, params.embed)
    return ad.add(base, ad.matmul(Tensor(pe_vectors), params.pe_proj))


def forward(
    x,
    series: ScaleSeries,
    params: ModelParams,
    pe_vectors,
    heads: int,
    f: int,
    c: int,
    capture: list | None = None,
) -> Tensor:
    """Full pipeline: embed, l blocks over the scale series, linear head."""
    h = embed(x, params, pe_vectors)
    for plan, blk in zip(series.plans, params.blocks):
        h = sba_block(h, plan, blk, heads, capture)
    out = ad.matmul(h, params.head)
    return ad.reshape(out, out.shape[:-1] + (f, c))


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every element (sum |err| / (n*f*c) per window)."""
    tgt = ad.as_tensor(target)
    if tuple(pred.shape) != tuple(tgt.shape):
        raise ShapeError(f"loss shapes differ: {tuple(pred.shape)} vs {tuple(tgt.shape)}")
    return ad.tensor_mean(ad.tensor_abs(ad.sub(pred, tgt)))


class SbaTransformer:
    """Config, partition series, positional encoding, and parameters in one place."""

    def __init__(self, config: ModelConfig, series: ScaleSeries, pe_vectors,
                 params: ModelParams | None = None, seed: int = 0):
        if len(series.plans) != config.l:
            raise ContractError(
                f"series has {len(series.plans)} plans, config.l={config.l}"
            )
        if series.plans[0].p != config.p0:
            raise ContractError(
                f"series starts at p={series.plans[0].p}, config.p0={config.p0}"
            )
        pe_vectors = np.asarray(pe_vectors, dtype=np.float64)
        if pe_vectors.shape != (config.n, config.k_pe):
            raise ContractError(
                f"encoding shape {pe_vectors.shape} != ({config.n}, {config.k_pe})"
            )
        self.config = config
        self.series = series
        self.pe_vectors = pe_vectors
        self.params = params if params is not None else init_params(config, seed)
        self.seed = seed

    def forward(self, x, capture: list | None = None) -> Tensor:
        return forward(
            x, self.series, self.params, self.pe_vectors,
            self.config.heads, self.config.f, self.config.c, capture,
        )

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(Tensor(x)).data


# ---------------------------------------------------------------------------
# attention cost: closed form and instrumented measurement


def _attention_flops(batch: int, s: int, dh: int) -> tuple:
    """(mults, adds) for scores (s x dh by dh x s) plus weights-times-values."""
    mults = batch * (s * s * dh + s * dh * s)
    adds = batch * (s * s * (dh - 1) + s * dh * (s - 1))
    return mults, adds


def flops_estimate(config: ModelConfig, series: ScaleSeries) -> dict:
    """Attention FLOPs per block: closed form next to an instrumented run.

    Only the two attention matmuls count (scores and weights-times-values);
    the per-node projections are linear in n and excluded on both sides. The
    measured pass drives attention_core on dummy tensors of the real shapes
    with the counter on, so the two columns must agree. Note the literal sum
    of the intra term over subgraphs is p * m^2 * d; the report carries the
    true totals rather than the looser per-subgraph bound.
    """
    h, dh = config.heads, config.d_head
    rng = np.random.default_rng(0)
    per_block = []
    closed_mults = closed_adds = 0
    ad.flops.reset()
    with ad.flops.counting():
        for plan in series.plans:
            im, ia = _attention_flops(plan.p * h, plan.m, dh)
            xm, xa = _attention_flops(h, plan.p, dh)
            per_block.append(
                {
                    "p": plan.p,
                    "m": plan.m,
                    "intra": im + ia,
                    "inter": xm + xa,
                }
            )
            closed_mults += im + xm
            closed_adds += ia + xa
            with ad.no_grad():
                q = Tensor(rng.standard_normal((plan.p, h, plan.m, dh)))
                k = Tensor(rng.standard_normal((plan.p, h, plan.m, dh)))
                v = Tensor(rng.standard_normal((plan.p, h, plan.m, dh)))
                attention_core(q, k, v, plan.mask[:, None, None, :])
                qs = Tensor(rng.standard_normal((h, plan.p, dh)))
                ks = Tensor(rng.standard_normal((h, plan.p, dh)))
                vs = Tensor(rng.standard_normal((h, plan.p, dh)))
                attention_core(qs, ks, vs, None)
    measured = ad.flops.report()
    closed_total = closed_mults + closed_adds
    return {
        "per_block": per_block,
        "closed_mults": closed_mults,
        "closed_adds": closed_adds,
        "closed_total": closed_total,
        "measured_mults": measured["mults"],
        "measured_adds": measured["adds"],
        "measured_total": measured["total"],
        "ratio": measured["total"] / closed_total,
    }


def attention_peak_bytes(config: ModelConfig, series: ScaleSeries) -> int:
    """Analytic peak working set of one block's attention, in bytes.

    Counts q/k/v, the score and weight matrices, and the attended output at
    their f64 sizes; the largest block wins. Deterministic by construction.
    """
    h, dh = config.heads, config.d_head
    peak = 0
    for plan in series.plans:
        intra = 8 * (4 * plan.p * plan.m * h * dh + 2 * plan.p * h * plan.m**2)
        inter = 8 * (4 * plan.p * h * dh + 2 * h * plan.p**2)
        peak = max(peak, intra + inter)
    return peak


# ---------------------------------------------------------------------------
# checkpoints


def _strip_bin(path) -> str:
    path = str(path)
    return path[:-4] if path.endswith(".bin") else path


def save_checkpoint(path, params: ModelParams, config: ModelConfig, seed: int = 0):
    """Little-endian f64 blob in manifest order + JSON manifest alongside."""
    stem = _strip_bin(path)
    offset = 0
    entries = []
    with open(stem + ".bin", "wb") as fh:
        for name, t in params.named():
            blob = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            fh.write(blob)
            entries.append(
                {"name": name, "shape": list(t.data.shape), "offset": offset}
            )
            offset += t.data.size
    manifest = {
        "config": asdict(config),
        "seed": seed,
        "tensors": entries,
        "total": offset,
    }
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (params, config, seed); shapes are validated against the manifest."""
    stem = _strip_bin(path)
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    config = ModelConfig(**manifest["config"])
    flat = np.fromfile(stem + ".bin", dtype="<f8")
    if flat.size != manifest["total"]:
        raise InputError(
            f"checkpoint blob holds {flat.size} values, manifest says {manifest['total']}"
        )
    params = init_params(config, manifest["seed"])
    by_name = dict(params.named())
    if len(manifest["tensors"]) != len(by_name):
        raise InputError("checkpoint manifest does not match the parameter manifest")
    for entry in manifest["tensors"]:
        t = by_name.get(entry["name"])
        if t is None or list(t.data.shape) != entry["shape"]:
            raise InputError(f"unexpected checkpoint tensor {entry['name']}")
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        t.data = (
            flat[entry["offset"] : entry["offset"] + size]
            .reshape(entry["shape"])
            .astype(np.float64)
        )
    return params, config, manifest["seed"]
