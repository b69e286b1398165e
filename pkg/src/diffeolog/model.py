"""Siamese convolutional autoencoder over displacement fields.

One shared encoder maps a displacement field to a latent vector z; one
shared decoder maps the scaled latent z / 2**n to the 2**n-th composition
root of the field, for every stage n up to the configured depth.  Training
processes registration pairs (forward and inverse field) through the same
weights and couples them with three losses: reconstruction of each field
from its composed roots, inverse consistency of the decoded roots, and
latent inverse consistency (the latents of a field and its inverse should be
exact negatives).  Composition in field space then corresponds to scaling in
latent space, and the deepest predicted root yields an amortized logarithm:
log(phi) ~= 2**N * (root_N - id).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward
from .fields import (
    DeformationField,
    Grid2,
    GridMismatchError,
    VectorField,
    field_rms,
    inverse_consistency_residual,
    rel_l2,
    self_compose,
)

_ENC_CHANNELS = (2, 16, 32, 64)
_COS_EPS = 1e-24  # keeps the in-graph cosine differentiable at zero latents


class TrainingDivergedError(RuntimeError):
    """Raised when a training batch produces a non-finite loss."""

    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"non-finite loss in epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 32
    latent_dim: int = 32
    n_stages: int = 4
    alpha_rec: float = 1.0
    alpha_inv: float = 0.5
    alpha_linv: float = 0.1
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self) -> None:
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.n_stages < 0:
            raise ValueError("n_stages must be >= 0")
        if self.alpha_rec <= 0 or self.alpha_inv < 0 or self.alpha_linv < 0:
            raise ValueError("loss weights must be >= 0 with alpha_rec > 0")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad optimizer settings")
        Grid2(self.height, self.width)

    @property
    def grid(self) -> Grid2:
        return Grid2(self.height, self.width)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def _down_sizes(config: ModelConfig) -> list[tuple[int, int]]:
    """Spatial sizes along the encoder: [(H, W), (H/2, W/2), ..., (H/8, W/8)]."""
    sizes = [(config.height, config.width)]
    for _ in range(3):
        sizes.append(ad.conv_out_hw(sizes[-1][0], sizes[-1][1], 2))
    return sizes


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Architecture tensor table: name -> shape, in storage order."""
    h8, w8 = _down_sizes(config)[-1]
    flat = _ENC_CHANNELS[-1] * h8 * w8
    L = config.latent_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(3):
        cin, cout = _ENC_CHANNELS[i], _ENC_CHANNELS[i + 1]
        shapes[f"enc_conv{i + 1}_w"] = (cout, cin, 3, 3)
        shapes[f"enc_conv{i + 1}_b"] = (cout,)
    shapes["enc_fc_w"] = (flat, L)
    shapes["enc_fc_b"] = (L,)
    shapes["dec_fc_w"] = (L, flat)
    shapes["dec_fc_b"] = (flat,)
    for i in range(3):
        cin, cout = _ENC_CHANNELS[3 - i], _ENC_CHANNELS[2 - i]
        shapes[f"dec_tconv{i + 1}_w"] = (cin, cout, 3, 3)
        shapes[f"dec_tconv{i + 1}_b"] = (cout,)
    return shapes


@dataclass
class ModelParams:
    """All weights as named tensors, plus the config that shaped them."""

    config: ModelConfig
    tensors: dict[str, Tensor]

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())


def init_params(config: ModelConfig, rng: np.random.Generator | None = None) -> ModelParams:
    """Fan-in-scaled uniform weight init (variance-preserving), zero biases."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    tensors: dict[str, Tensor] = {}
    dtype = config.dtype
    for name, shape in param_shapes(config).items():
        if name.endswith("_b"):
            tensors[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
            continue
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3] if name.startswith("enc") else shape[0] * shape[2] * shape[3]
        else:
            fan_in = shape[0]
        lim = math.sqrt(6.0 / fan_in)
        tensors[name] = Tensor(rng.uniform(-lim, lim, size=shape).astype(dtype), requires_grad=True)
    return ModelParams(config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# forward passes


def _encode_t(params: ModelParams, x: Tensor) -> Tensor:
    t = params.tensors
    h = ad.leaky_relu(ad.conv2d(x, t["enc_conv1_w"], t["enc_conv1_b"], 2))
    h = ad.leaky_relu(ad.conv2d(h, t["enc_conv2_w"], t["enc_conv2_b"], 2))
    h = ad.leaky_relu(ad.conv2d(h, t["enc_conv3_w"], t["enc_conv3_b"], 2))
    h = ad.reshape(h, (h.shape[0], h.shape[1] * h.shape[2] * h.shape[3]))
    return ad.dense(h, t["enc_fc_w"], t["enc_fc_b"])


def _decode_t(params: ModelParams, z: Tensor) -> Tensor:
    t = params.tensors
    sizes = _down_sizes(params.config)
    h8, w8 = sizes[-1]
    h = ad.leaky_relu(ad.dense(z, t["dec_fc_w"], t["dec_fc_b"]))
    h = ad.reshape(h, (h.shape[0], _ENC_CHANNELS[-1], h8, w8))
    h = ad.leaky_relu(ad.conv2d_transpose(h, t["dec_tconv1_w"], t["dec_tconv1_b"], 2, sizes[2]))
    h = ad.leaky_relu(ad.conv2d_transpose(h, t["dec_tconv2_w"], t["dec_tconv2_b"], 2, sizes[1]))
    return ad.conv2d_transpose(h, t["dec_tconv3_w"], t["dec_tconv3_b"], 2, sizes[0])


@numba.njit(cache=True)
def _conv_block(x, ker, bias, stride, act):
    """Padded strided cross-correlation via im2col + BLAS, optional leaky
    rectifier.  One compiled call per layer keeps inference dispatch-free."""
    B, C, H, W = x.shape
    F = ker.shape[0]
    k = ker.shape[2]
    p = (k - 1) // 2
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    cols = np.zeros((B * Ho * Wo, C * k * k), dtype=x.dtype)
    row = 0
    for b in range(B):
        for y in range(Ho):
            for xo in range(Wo):
                col = 0
                for c in range(C):
                    for a in range(k):
                        r = y * stride + a - p
                        ok_r = 0 <= r < H
                        for bb in range(k):
                            cc = xo * stride + bb - p
                            if ok_r and 0 <= cc < W:
                                cols[row, col] = x[b, c, r, cc]
                            col += 1
                row += 1
    kmat = np.ascontiguousarray(ker.reshape(F, C * k * k).T)
    out_m = np.dot(cols, kmat)
    out = np.empty((B, F, Ho, Wo), dtype=x.dtype)
    row = 0
    for b in range(B):
        for y in range(Ho):
            for xo in range(Wo):
                for f in range(F):
                    v = out_m[row, f] + bias[f]
                    if act and v < 0.0:
                        v *= 0.1
                    out[b, f, y, xo] = v
                row += 1
    return out


@numba.njit(cache=True)
def _tconv_block(x, ker, bias, stride, H, W, act):
    """Adjoint of _conv_block's correlation, same im2col + BLAS scheme."""
    B, F, h, w = x.shape
    C = ker.shape[1]
    k = ker.shape[2]
    p = (k - 1) // 2
    cols = np.zeros((B * H * W, F * k * k), dtype=x.dtype)
    row = 0
    for b in range(B):
        for r in range(H):
            for cc in range(W):
                for a in range(k):
                    y = r - a + p
                    ok_y = y % stride == 0
                    y //= stride
                    ok_y = ok_y and 0 <= y < h
                    for bb in range(k):
                        xo = cc - bb + p
                        if ok_y and xo % stride == 0:
                            xo //= stride
                            if 0 <= xo < w:
                                base = (a * k + bb) * F
                                for f in range(F):
                                    cols[row, base + f] = x[b, f, y, xo]
                row += 1
    # weight matrix rows ordered (a, bb, f) to match the patch layout
    kmat = np.ascontiguousarray(ker.transpose(2, 3, 0, 1)).reshape(k * k * F, C)
    out_m = np.dot(cols, kmat)
    out = np.empty((B, C, H, W), dtype=x.dtype)
    row = 0
    for b in range(B):
        for r in range(H):
            for cc in range(W):
                for c in range(C):
                    v = out_m[row, c] + bias[c]
                    if act and v < 0.0:
                        v *= 0.1
                    out[b, c, r, cc] = v
                row += 1
    return out


def _lrelu_arr(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, 0.1 * x)


def _encode_arr(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Inference-only encoder on raw arrays (compiled, graph-free)."""
    t = params.tensors
    h = _conv_block(x, t["enc_conv1_w"].data, t["enc_conv1_b"].data, 2, True)
    h = _conv_block(h, t["enc_conv2_w"].data, t["enc_conv2_b"].data, 2, True)
    h = _conv_block(h, t["enc_conv3_w"].data, t["enc_conv3_b"].data, 2, True)
    h = h.reshape(h.shape[0], -1)
    return h @ t["enc_fc_w"].data + t["enc_fc_b"].data


def _decode_arr(params: ModelParams, z: np.ndarray) -> np.ndarray:
    t = params.tensors
    sizes = _down_sizes(params.config)
    h8, w8 = sizes[-1]
    h = _lrelu_arr(z @ t["dec_fc_w"].data + t["dec_fc_b"].data)
    h = np.ascontiguousarray(h.reshape(h.shape[0], _ENC_CHANNELS[-1], h8, w8))
    h = _tconv_block(h, t["dec_tconv1_w"].data, t["dec_tconv1_b"].data, 2, sizes[2][0], sizes[2][1], True)
    h = _tconv_block(h, t["dec_tconv2_w"].data, t["dec_tconv2_b"].data, 2, sizes[1][0], sizes[1][1], True)
    return _tconv_block(h, t["dec_tconv3_w"].data, t["dec_tconv3_b"].data, 2, sizes[0][0], sizes[0][1], False)


def _to_chw(phi: DeformationField) -> np.ndarray:
    return np.moveaxis(phi.displacement.data, -1, 0)


def _from_chw(grid: Grid2, arr: np.ndarray) -> DeformationField:
    return DeformationField(VectorField(grid, np.moveaxis(arr, 0, -1)))


def _check_grid(params: ModelParams, grid: Grid2) -> None:
    if grid != params.config.grid:
        raise GridMismatchError(
            f"field grid {grid.shape} does not match model grid {params.config.grid.shape}"
        )


def encode(params: ModelParams, phi: DeformationField) -> np.ndarray:
    """Latent vector of a deformation field (length latent_dim)."""
    _check_grid(params, phi.grid)
    x = _to_chw(phi)[None].astype(params.config.dtype, copy=False)
    return _encode_arr(params, x)[0]


def decode_root(params: ModelParams, z: np.ndarray, stage: int) -> DeformationField:
    """Decode z / 2**stage into the predicted 2**stage-th composition root."""
    if not 0 <= stage <= params.config.n_stages:
        raise ValueError(f"stage {stage} out of range [0, {params.config.n_stages}]")
    z = np.asarray(z, dtype=params.config.dtype)
    if z.shape != (params.config.latent_dim,):
        raise ValueError(f"latent shape {z.shape} != ({params.config.latent_dim},)")
    out = _decode_arr(params, z[None] / float(2 ** stage))
    return _from_chw(params.config.grid, out[0])


def infer_log(params: ModelParams, phi: DeformationField) -> VectorField:
    """Amortized logarithm: 2**N times the deepest predicted root displacement."""
    _check_grid(params, phi.grid)
    n = params.config.n_stages
    x = _to_chw(phi)[None].astype(params.config.dtype, copy=False)
    z = _encode_arr(params, x)
    root = _decode_arr(params, z / float(2 ** n))[0]
    return VectorField(params.config.grid, np.moveaxis(root, 0, -1) * float(2 ** n))


# ---------------------------------------------------------------------------
# losses


def _msq(diff: Tensor) -> Tensor:
    """Mean over pixels of the squared displacement norm = 2 * element mean."""
    return ad.scale(ad.mean_all(ad.square(diff)), 2.0)


def _loss_graph(params: ModelParams, fwd: np.ndarray, bwd: np.ndarray, config: ModelConfig):
    """Batched training loss.  fwd/bwd are (B, 2, H, W); returns
    (total Tensor, parts dict), every term averaged over the batch.

    All stages run through the decoder in one stacked batch: rows are
    ordered stage-major, [ab_0.. ab_B, ba_0.. ba_B] within each stage.  The
    self-composition cascade peels one finished stage off the front per
    squaring depth, so stage n's root gets composed exactly 2**n times.
    """
    B = fwd.shape[0]
    B2 = 2 * B
    S = config.n_stages + 1
    x_np = np.concatenate([fwd, bwd], axis=0)
    x = Tensor(x_np)
    z = _encode_t(params, x)
    if S > 1:
        z_all = ad.concat0([ad.scale(z, 0.5 ** n) for n in range(S)])
    else:
        z_all = z
    roots = _decode_t(params, z_all)  # (S * B2, 2, H, W)
    comps = [ad.slice0(roots, 0, B2)]
    cur = roots
    for _ in range(1, S):
        cur = ad.slice0(cur, B2, cur.shape[0])
        cur = ad.warp(cur, cur)
        comps.append(ad.slice0(cur, 0, B2))
    comp_all = ad.concat0(comps) if S > 1 else comps[0]
    target = Tensor(np.tile(x_np, (S, 1, 1, 1)))
    rec = ad.scale(ad.mean_all(ad.square(ad.sub(comp_all, target))), 4.0 * S)
    # both composition orders of every stage's forward/backward roots at once
    blocks = np.arange(S * B2, dtype=np.intp).reshape(S, 2, B)
    swap_perm = blocks[:, ::-1].reshape(-1)
    inv_all = ad.warp(roots, ad.permute0(roots, swap_perm))
    inv = ad.scale(ad.mean_all(ad.square(inv_all)), 4.0 * S)
    z_ab = ad.slice0(z, 0, B)
    z_ba = ad.slice0(z, B, B2)
    mag = ad.sum_last(ad.square(ad.add(z_ab, z_ba)))
    na = ad.sqrt(ad.add_const(ad.sum_last(ad.square(z_ab)), _COS_EPS))
    nb = ad.sqrt(ad.add_const(ad.sum_last(ad.square(z_ba)), _COS_EPS))
    cos = ad.div(ad.sum_last(ad.mul(z_ab, z_ba)), ad.mul(na, nb))
    linv = ad.mean_all(ad.add(ad.scale(ad.add_const(cos, 1.0), 0.5), mag))
    total = ad.add(
        ad.add(ad.scale(rec, config.alpha_rec), ad.scale(inv, config.alpha_inv)),
        ad.scale(linv, config.alpha_linv),
    )
    parts = {
        "rec": float(rec.data),
        "inv": float(inv.data),
        "linv": float(linv.data),
        "total": float(total.data),
    }
    return total, parts


def _pair_batch(pair) -> tuple[np.ndarray, np.ndarray]:
    fwd, bwd = pair
    if fwd.grid != bwd.grid:
        raise GridMismatchError("pair fields live on different grids")
    return _to_chw(fwd)[None], _to_chw(bwd)[None]


def loss_rec(params: ModelParams, pair, config: ModelConfig | None = None) -> float:
    """Reconstruction loss of one pair: for each stage n, the decoded root is
    composed 2**n times and compared against its field, forward plus
    backward, mean over pixels and summed over stages."""
    config = config or params.config
    fwd, bwd = _pair_batch(pair)
    _check_grid(params, pair[0].grid)
    _, parts = _loss_graph(params, fwd, bwd, config)
    return parts["rec"]


def loss_inv(params: ModelParams, pair, config: ModelConfig | None = None) -> float:
    """Inverse consistency loss of one pair: composed forward/backward roots
    should be the identity at every stage, both composition orders."""
    config = config or params.config
    fwd, bwd = _pair_batch(pair)
    _check_grid(params, pair[0].grid)
    _, parts = _loss_graph(params, fwd, bwd, config)
    return parts["inv"]


def loss_linv(z_ab: np.ndarray, z_ba: np.ndarray) -> float:
    """Latent inverse consistency: (1 + cos) / 2 + ||z_ab + z_ba||^2.

    Zero exactly when z_ba = -z_ab with nonzero norm.  If either norm is
    below 1e-12 the cosine term is the neutral value 0.5 (degenerate case,
    reported via warning).
    """
    z_ab = np.asarray(z_ab, dtype=np.float64)
    z_ba = np.asarray(z_ba, dtype=np.float64)
    if z_ab.shape != z_ba.shape or z_ab.ndim != 1:
        raise ValueError("latent vectors must share a 1D shape")
    na = float(np.linalg.norm(z_ab))
    nb = float(np.linalg.norm(z_ba))
    mag = float(np.sum((z_ab + z_ba) ** 2))
    if na < 1e-12 or nb < 1e-12:
        import warnings

        warnings.warn("degenerate latent norm, cosine term set neutral", RuntimeWarning)
        return 0.5 + mag
    cos = float(z_ab @ z_ba) / (na * nb)
    return (1.0 + cos) / 2.0 + mag


def total_loss(params: ModelParams, pair, config: ModelConfig | None = None):
    """Weighted sum of the three losses for one pair, with the breakdown."""
    config = config or params.config
    fwd, bwd = _pair_batch(pair)
    _check_grid(params, pair[0].grid)
    _, parts = _loss_graph(params, fwd, bwd, config)
    return parts["total"], parts


# ---------------------------------------------------------------------------
# training


def train(dataset, config: ModelConfig, progress=None):
    """Train on a list of (fwd, bwd) deformation pairs.

    Siamese by construction: one parameter set sees both fields of every
    pair.  Deterministic for a fixed config seed.  Returns (params, history)
    where history holds per-epoch means of each loss term.  A non-finite
    batch loss aborts with the offending epoch and batch index.
    """
    if len(dataset) < 2:
        raise ValueError("training needs at least 2 pairs")
    for fwd, bwd in dataset:
        _ = fwd.grid  # touch to validate structure
        if fwd.grid != config.grid or bwd.grid != config.grid:
            raise GridMismatchError("dataset grid does not match the model config")
    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    dtype = config.dtype
    fwd_all = np.stack([_to_chw(p[0]) for p in dataset]).astype(dtype)
    bwd_all = np.stack([_to_chw(p[1]) for p in dataset]).astype(dtype)
    opt = Adam(params.trainable(), lr=config.lr)
    n = len(dataset)
    history: list[dict[str, float]] = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sums = {"rec": 0.0, "inv": 0.0, "linv": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            total, parts = _loss_graph(params, fwd_all[idx], bwd_all[idx], config)
            if not math.isfinite(parts["total"]):
                raise TrainingDivergedError(epoch, n_batches)
            opt.zero_grad()
            backward(total)
            opt.step()
            for k in sums:
                sums[k] += parts[k]
            n_batches += 1
        record = {"epoch": float(epoch)}
        record.update({k: sums[k] / n_batches for k in ("rec", "inv", "linv", "total")})
        history.append(record)
        if progress is not None:
            progress(
                "epoch={epoch} rec={rec:.6g} inv={inv:.6g} linv={linv:.6g} total={total:.6g}".format(
                    epoch=epoch, **{k: record[k] for k in ("rec", "inv", "linv", "total")}
                )
            )
    return params, history


# ---------------------------------------------------------------------------
# evaluation helpers


def evaluate(params: ModelParams, pairs, velocities=None) -> dict:
    """Held-out quality metrics of a trained model.

    reconstruction: stage-0 RMS error relative to the target field RMS.
    inverse residual: mean over stages of the decoded-root inverse
    consistency residual (grid units).  latent cosine: cos(z_ab, z_ba).
    negated decode: decode_root(-z, n) composed 2**n times against the true
    inverse, RMS relative to the inverse field RMS, mean over stages.  With
    ground-truth velocities, also the median relative L2 error of infer_log.
    """
    cfg = params.config
    recs, invs, coss, negs, logerrs = [], [], [], [], []
    for i, (fwd, bwd) in enumerate(pairs):
        z_ab = encode(params, fwd)
        z_ba = encode(params, bwd)
        root0 = decode_root(params, z_ab, 0)
        recs.append(
            field_rms(root0.displacement.data - fwd.displacement.data)
            / field_rms(fwd.displacement)
        )
        denom = max(float(np.linalg.norm(z_ab)) * float(np.linalg.norm(z_ba)), 1e-30)
        coss.append(float(z_ab @ z_ba) / denom)
        inv_n, neg_n = [], []
        bwd_rms = field_rms(bwd.displacement)
        for stage in range(cfg.n_stages + 1):
            ra = decode_root(params, z_ab, stage)
            rb = decode_root(params, z_ba, stage)
            inv_n.append(inverse_consistency_residual(ra, rb))
            rneg = decode_root(params, -z_ab, stage)
            recovered = self_compose(rneg, stage)
            neg_n.append(
                field_rms(recovered.displacement.data - bwd.displacement.data) / bwd_rms
            )
        invs.append(float(np.mean(inv_n)))
        negs.append(float(np.mean(neg_n)))
        if velocities is not None:
            logerrs.append(rel_l2(infer_log(params, fwd), velocities[i]))
    out = {
        "reconstruction_rel_rms_mean": float(np.mean(recs)),
        "inverse_residual_mean": float(np.mean(invs)),
        "latent_cosine_mean": float(np.mean(coss)),
        "negated_decode_rel_rms_mean": float(np.mean(negs)),
        "n_pairs": len(list(pairs)),
    }
    if velocities is not None:
        out["log_recovery_rel_l2_median"] = float(np.median(logerrs))
    return out


def timing_comparison(params: ModelParams, fields, iss_cfg=None) -> dict:
    """Wall-clock seconds per field: optimization-based log vs amortized log."""
    import time

    from .groupmaps import IssConfig, iss_log

    iss_cfg = iss_cfg or IssConfig()
    fields = list(fields)
    infer_log(params, fields[0])  # warm up cached einsum paths
    t0 = time.perf_counter()
    for f in fields:
        iss_log(f, iss_cfg)
    iss_s = (time.perf_counter() - t0) / len(fields)
    t0 = time.perf_counter()
    for f in fields:
        infer_log(params, f)
    amortized_s = (time.perf_counter() - t0) / len(fields)
    return {
        "iss_seconds_per_field": iss_s,
        "amortized_seconds_per_field": amortized_s,
        "speedup": iss_s / amortized_s if amortized_s > 0 else float("inf"),
    }
