"""Straight-line reference implementations used as independent oracles.

Everything here is deliberately unvectorized / unfused numpy (or a different
library algorithm than the production path) so a test never exercises the
same code it is checking. Weights are read from the production modules but
the arithmetic is re-derived from scratch.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg


# ---------------------------------------------------------------------------
# Resampling and blurs.


def reflect_index(i: int, n: int) -> int:
    """Whole-sample reflection (edge not duplicated), valid for |overhang| < n."""
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


def ref_gaussian_blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-pixel 2-D correlation of an (H, W) array with reflect borders."""
    k = kernel.shape[0]
    pad = k // 2
    h, w = img.shape
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(k):
                for dj in range(k):
                    ii = reflect_index(i + di - pad, h)
                    jj = reflect_index(j + dj - pad, w)
                    acc += img[ii, jj] * kernel[di, dj]
            out[i, j] = acc
    return out


def ref_blur_downsample(img: np.ndarray, kernel: np.ndarray, factor: int) -> np.ndarray:
    """Blur then stride-subsample an (H, W, C) image, channel by channel."""
    chans = [ref_gaussian_blur(img[..., c], kernel)[::factor, ::factor] for c in range(img.shape[2])]
    return np.stack(chans, axis=-1)


def _keys_cubic(t: float, a: float = -0.75) -> float:
    at = abs(t)
    if at <= 1.0:
        return ((a + 2.0) * at - (a + 3.0)) * at * at + 1.0
    if at < 2.0:
        return (((at - 5.0) * at + 8.0) * at - 4.0) * a
    return 0.0


def ref_bicubic(img: np.ndarray, target: int) -> np.ndarray:
    """Direct bicubic formula: Keys kernel a=-0.75, half-pixel centers,
    border indices clamped."""
    h, w, c = img.shape
    out = np.zeros((target, target, c))
    for i in range(target):
        sy = (i + 0.5) * h / target - 0.5
        y0 = int(np.floor(sy))
        wy = [_keys_cubic(sy - (y0 + d)) for d in range(-1, 3)]
        for j in range(target):
            sx = (j + 0.5) * w / target - 0.5
            x0 = int(np.floor(sx))
            wx = [_keys_cubic(sx - (x0 + d)) for d in range(-1, 3)]
            for ch in range(c):
                acc = 0.0
                for dy in range(4):
                    yy = min(max(y0 - 1 + dy, 0), h - 1)
                    for dx in range(4):
                        xx = min(max(x0 - 1 + dx, 0), w - 1)
                        acc += img[yy, xx, ch] * wy[dy] * wx[dx]
                out[i, j, ch] = acc
    return out


# ---------------------------------------------------------------------------
# Attention blocks (weights pulled from the torch modules, math re-derived).


def _np(t) -> np.ndarray:
    return t.detach().cpu().double().numpy()


def ref_batchnorm_train(x: np.ndarray, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Train-mode batch norm on (N, C, H, W): per-channel batch stats, biased var."""
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)  # biased, matching normalization
    xn = (x - mean) / np.sqrt(var + eps)
    return xn * gamma[None, :, None, None] + beta[None, :, None, None]


def _conv1x1(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    out = np.einsum("oc,nchw->nohw", weight[:, :, 0, 0], x)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def ref_channel_attention(module, x: np.ndarray) -> np.ndarray:
    """Shared-MLP channel gate from avg and max pooled vectors; (N, C, 1, 1)."""
    w1 = _np(module.mlp[0].weight)
    w2 = _np(module.mlp[2].weight)
    n, c, h, w = x.shape
    out = np.zeros((n, c, 1, 1))
    for b in range(n):
        avg = np.array([x[b, ch].mean() for ch in range(c)])
        mx = np.array([x[b, ch].max() for ch in range(c)])
        score = np.zeros(c)
        for pooled in (avg, mx):
            hidden = np.maximum(w1[:, :, 0, 0] @ pooled, 0.0)
            score = score + w2[:, :, 0, 0] @ hidden
        out[b, :, 0, 0] = _sigmoid(score)
    return out


def _conv2d_replicate(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Direct (N, Cin, H, W) conv with replicate borders, stride 1, no bias."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, cout, h, w))
    for b in range(n):
        for co in range(cout):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                ii = min(max(i + di - ph, 0), h - 1)
                                jj = min(max(j + dj - pw, 0), w - 1)
                                acc += x[b, ci, ii, jj] * weight[co, ci, di, dj]
                    out[b, co, i, j] = acc
    return out


def ref_spatial_attention(module, x: np.ndarray) -> np.ndarray:
    """Channel mean/max stats -> kxk conv (replicate pad) -> sigmoid; (N, 1, H, W)."""
    weight = _np(module.conv.weight)
    stats = np.stack([x.mean(axis=1), x.max(axis=1)], axis=1)
    return _sigmoid(_conv2d_replicate(stats, weight))


def ref_attention_gate(module, f_enc: np.ndarray, f_dec: np.ndarray) -> np.ndarray:
    """Unfused evaluation of the whole skip-gating block in train mode."""
    pe = _conv1x1(f_enc, _np(module.proj_enc.weight), _np(module.proj_enc.bias))
    pe = ref_batchnorm_train(pe, _np(module.bn_enc.weight), _np(module.bn_enc.bias))
    pd = _conv1x1(f_dec, _np(module.proj_dec.weight), _np(module.proj_dec.bias))
    pd = ref_batchnorm_train(pd, _np(module.bn_dec.weight), _np(module.bn_dec.bias))
    fused = np.concatenate([pe, pd], axis=1)
    cw = ref_channel_attention(module.channel_gate, fused)
    reweighted = cw * fused
    sw = ref_spatial_attention(module.spatial_gate, reweighted)
    gated = sw * reweighted
    mask = _sigmoid(_conv1x1(gated, _np(module.mask_conv.weight), _np(module.mask_conv.bias)))
    return mask * f_enc


# ---------------------------------------------------------------------------
# Losses.


def ref_info_nce(v, v_pos, v_negs, temperature: float) -> float:
    logits = [float(np.dot(v, v_pos)) / temperature]
    for neg in v_negs:
        logits.append(float(np.dot(v, neg)) / temperature)
    logits = np.array(logits)
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[0])


def _embeds_as_numpy(embed_set):
    return {layer: embed_set.vectors[layer].detach().double().numpy() for layer in embed_set.layers}


def ref_patch_nce(input_set, fake_set, temperature: float) -> float:
    """Loop over layers and locations calling the scalar InfoNCE reference."""
    q_all = _embeds_as_numpy(fake_set)
    k_all = _embeds_as_numpy(input_set)
    layer_means = []
    for layer in fake_set.layers:
        q, k = q_all[layer], k_all[layer]
        vals = []
        for i in range(q.shape[0]):
            negs = [k[j] for j in range(k.shape[0]) if j != i]
            vals.append(ref_info_nce(q[i], k[i], negs, temperature))
        layer_means.append(np.mean(vals))
    return float(np.mean(layer_means))


def ref_adaptive_patch_nce(fake_set, real_set, t, total, ramp_fraction, temperature) -> float:
    """As ref_patch_nce but each pair weighted by the ramped similarity weight."""
    q_all = _embeds_as_numpy(fake_set)
    k_all = _embeds_as_numpy(real_set)
    gt = min(1.0, (t / total) / ramp_fraction)
    layer_means = []
    for layer in fake_set.layers:
        q, k = q_all[layer], k_all[layer]
        vals = []
        for i in range(q.shape[0]):
            sim = float(np.dot(q[i], k[i]))
            weight = (1.0 - gt) * 1.0 + gt * max(0.0, sim)
            negs = [k[j] for j in range(k.shape[0]) if j != i]
            vals.append(weight * ref_info_nce(q[i], k[i], negs, temperature))
        layer_means.append(np.mean(vals))
    return float(np.mean(layer_means))


def ref_gaussian_pyramid(fake: np.ndarray, real: np.ndarray, kernel: np.ndarray, weights) -> float:
    """Brute-force pyramid L1 on (H, W, C) images."""
    a, b = fake.copy(), real.copy()
    total = 0.0
    for i, lam in enumerate(weights):
        total += lam * float(np.mean(np.abs(a - b)))
        if i + 1 < len(weights):
            a = ref_blur_downsample(a, kernel, 2)
            b = ref_blur_downsample(b, kernel, 2)
    return total


# ---------------------------------------------------------------------------
# Metrics.


def ref_ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Naive per-window SSIM over all fully contained windows."""
    x = np.arange(window) - (window - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    wgt = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2
    h, w, c = a.shape
    vals = []
    for ch in range(c):
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                wa = a[i : i + window, j : j + window, ch]
                wb = b[i : i + window, j : j + window, ch]
                mu_a = (wgt * wa).sum()
                mu_b = (wgt * wb).sum()
                var_a = (wgt * wa * wa).sum() - mu_a**2
                var_b = (wgt * wb * wb).sum() - mu_b**2
                cov = (wgt * wa * wb).sum() - mu_a * mu_b
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
                vals.append(num / den)
    return float(np.mean(vals))


def ref_perceptual_distance(feats_a, feats_b) -> float:
    """Loop-based normalized feature distance over FeatureMap lists."""
    dists = []
    for fa, fb in zip(feats_a, feats_b):
        da, db = fa.data, fb.data
        c, h, w = da.shape
        acc = 0.0
        for i in range(h):
            for j in range(w):
                va = da[:, i, j] / (np.sqrt((da[:, i, j] ** 2).sum()) + 1e-10)
                vb = db[:, i, j] / (np.sqrt((db[:, i, j] ** 2).sum()) + 1e-10)
                acc += ((va - vb) ** 2).sum()
        dists.append(acc / (h * w))
    return float(np.mean(dists))


def ref_phv_layers(feats_a, feats_b, grid: int = 8):
    """Bit-by-bit perceptual hash distance per layer."""

    def code(data):
        c, h, w = data.shape
        pooled = np.zeros((c, grid, grid))
        for ch in range(c):
            for i in range(grid):
                r0 = (i * h) // grid
                r1 = int(np.ceil(((i + 1) * h) / grid))
                for j in range(grid):
                    c0 = (j * w) // grid
                    c1 = int(np.ceil(((j + 1) * w) / grid))
                    pooled[ch, i, j] = data[ch, r0:r1, c0:c1].mean()
        bits = np.zeros_like(pooled, dtype=bool)
        for ch in range(c):
            bits[ch] = pooled[ch] > pooled[ch].mean()
        return bits

    out = []
    for fa, fb in zip(feats_a, feats_b):
        ca, cb = code(fa.data), code(fb.data)
        out.append(float(np.mean(ca != cb)))
    return out


def ref_frechet(mu1, cov1, mu2, cov2) -> float:
    """Classic formulation via scipy's general matrix square root."""
    covmean = linalg.sqrtm(cov1 @ cov2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))


def ref_kid(x: np.ndarray, y: np.ndarray) -> float:
    """Double-loop u-statistic MMD^2 with the cubic polynomial kernel."""
    d = x.shape[1]

    def k(u, v):
        return (float(np.dot(u, v)) / d + 1.0) ** 3

    m = x.shape[0]
    sxx = syy = sxy = 0.0
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            sxx += k(x[i], x[j])
            syy += k(y[i], y[j])
            sxy += k(x[i], y[j])
    return (sxx + syy - 2.0 * sxy) / (m * (m - 1))


def ref_score_map_size(n: int) -> int:
    """Patch-discriminator stride arithmetic for a square input."""
    for stride in (2, 2, 2, 1, 1):
        n = (n + 2 - 4) // stride + 1
    return n
