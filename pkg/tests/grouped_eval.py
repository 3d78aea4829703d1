"""Vectorized finite-difference oracle for the composite loss.

Evaluating the production forward once per perturbed coordinate is far too
slow to difference every parameter of the real architecture, so this module
re-evaluates the network for many single-coordinate perturbations at once,
exploiting two exact structural facts:

* conv, batch-norm affine, and dense layers are linear in their parameters,
  so a one-coordinate perturbation changes the layer output by a closed-form
  delta added to the cached base output;
* batch norm, ReLU, and pooling act per channel, so a delta confined to one
  channel stays confined to that channel until the next convolution, which is
  linear in its input and can be patched as cached_output + conv(delta on a
  single input channel).

Per-sample dense layers fold the perturbation-group axis into the batch axis
and reuse the production kernels. The only reimplemented math is
group-separated batch norm and the per-group loss reduction; `verify()`
cross-checks whole evaluations against the production forward at randomly
sampled perturbed points, which exercises every code path used by
`fd_gradient`.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sigclust import kernels, losses, nn

# stage produced by each densely-patched parameter tensor (first and last conv
# blocks have few coordinates or cheap downstreams, so sparsity buys nothing)
_DENSE_ENTRY = {
    "conv1_w": "a1", "conv1_b": "a1",
    "bn1_gamma": "b1", "bn1_beta": "b1",
    "conv4_w": "a4", "conv4_b": "a4",
    "bn4_gamma": "b4", "bn4_beta": "b4",
    "dense1_w": "h1", "dense1_b": "h1",
    "dense2_w": "z", "dense2_b": "z",
}

# tensors whose perturbation stays confined to one channel until the next conv
_FAMILY = {
    "conv2_w": (2, "a"), "conv2_b": (2, "a"),
    "bn2_gamma": (2, "b"), "bn2_beta": (2, "b"),
    "bn2p_gamma": (2, "q"), "bn2p_beta": (2, "q"),
    "conv3_w": (3, "a"), "conv3_b": (3, "a"),
    "bn3_gamma": (3, "b"), "bn3_beta": (3, "b"),
    "bn3p_gamma": (3, "q"), "bn3p_beta": (3, "q"),
}

_ORDER = ["a1", "b1", "r1", "a2", "b2", "r2", "p2", "q2", "a3", "b3", "r3",
          "p3", "q3", "a4", "b4", "r4", "h1", "rh", "z"]

# the folded batches are large; the im2col/BLAS kernels handle them far better
# than the loop-nest backend (verify() bounds the cross-backend deviation)
_conv = kernels.conv1d_forward_numpy


def _pool(v):
    e, m, length = v.shape[0], v.shape[1], v.shape[-1]
    lout = length // 2
    return v[..., :2 * lout].reshape(v.shape[:-1] + (lout, 2)).max(axis=-1)


def _bn_grouped(x, gamma, beta):
    """Train-mode batch norm with statistics kept per group: x is (E, m, C, L)."""
    mu = x.mean(axis=(1, 3))
    var = x.var(axis=(1, 3))
    xhat = (x - mu[:, None, :, None]) / np.sqrt(var + nn.BN_EPS)[:, None, :, None]
    return gamma[None, None, :, None] * xhat + beta[None, None, :, None]


def _bn_channel(x, gamma_g, beta_g):
    """Batch norm of one channel per group: x is (E, m, L), params are (E,)."""
    mu = x.mean(axis=(1, 2))
    var = x.var(axis=(1, 2))
    xhat = (x - mu[:, None, None]) / np.sqrt(var + nn.BN_EPS)[:, None, None]
    return gamma_g[:, None, None] * xhat + beta_g[:, None, None]


def _fold(op, x):
    e, m = x.shape[:2]
    out = op(np.ascontiguousarray(x.reshape((e * m,) + x.shape[2:])))
    return out.reshape((e, m) + out.shape[1:])


class GroupedLossEval:
    """Loss of (pairwise_loss o similarity o forward) under many one-coordinate
    parameter perturbations, sharing all unperturbed computation."""

    def __init__(self, model, batch, pairs, lam):
        self.model = model
        self.batch = np.asarray(batch, dtype=np.float64)
        self.pairs = pairs
        self.lam = lam
        probe = model.copy()
        feats = nn.forward(probe, self.batch, train_mode=True)
        self.base_loss = losses.pairwise_loss(
            losses.similarity_matrix(feats), pairs, lam).loss
        cache = probe._cache
        self.acts = dict(cache.acts)
        self.acts["batch"] = cache.batch
        # z is not needed by backward, so the production cache drops it
        self.acts["z"] = cache.acts["rh"] @ model.params["dense2_w"].T + model.params["dense2_b"]
        self.bn_xhat = {name: c[0] for name, c in cache.bn.items()}
        pad = nn.KERNEL_SIZE // 2
        self.padded = {
            name: np.pad(self.acts[src], ((0, 0), (0, 0), (pad, pad)))
            for name, src in (("conv1", "batch"), ("conv2", "r1"),
                              ("conv3", "q2"), ("conv4", "q3"))
        }
        m = self.batch.shape[0]
        offdiag = ~np.eye(m, dtype=bool)
        self.sel_pos = pairs.positive & offdiag
        self.sel_neg = pairs.negative & offdiag
        self.num_selected = int(np.count_nonzero(self.sel_pos | self.sel_neg))

    # -- grouped downstream evaluation --------------------------------------

    def _transition(self, stage, x):
        p = self.model.params
        if stage == "a1":
            return _bn_grouped(x, p["bn1_gamma"], p["bn1_beta"])
        if stage == "b1":
            return np.maximum(x, 0.0)
        if stage == "r1":
            return _fold(lambda v: _conv(v, p["conv2_w"], p["conv2_b"]), x)
        if stage == "a2":
            return _bn_grouped(x, p["bn2_gamma"], p["bn2_beta"])
        if stage == "b2":
            return np.maximum(x, 0.0)
        if stage == "r2":
            return _pool(x)
        if stage == "p2":
            return _bn_grouped(x, p["bn2p_gamma"], p["bn2p_beta"])
        if stage == "q2":
            return _fold(lambda v: _conv(v, p["conv3_w"], p["conv3_b"]), x)
        if stage == "a3":
            return _bn_grouped(x, p["bn3_gamma"], p["bn3_beta"])
        if stage == "b3":
            return np.maximum(x, 0.0)
        if stage == "r3":
            return _pool(x)
        if stage == "p3":
            return _bn_grouped(x, p["bn3p_gamma"], p["bn3p_beta"])
        if stage == "q3":
            return _fold(lambda v: _conv(v, p["conv4_w"], p["conv4_b"]), x)
        if stage == "a4":
            return _bn_grouped(x, p["bn4_gamma"], p["bn4_beta"])
        if stage == "b4":
            return np.maximum(x, 0.0)
        if stage == "r4":
            e, m = x.shape[:2]
            return x.reshape(e, m, -1) @ p["dense1_w"].T + p["dense1_b"]
        if stage == "h1":
            return np.maximum(x, 0.0)
        if stage == "rh":
            return x @ p["dense2_w"].T + p["dense2_b"]
        raise KeyError(stage)

    def _loss_from_z(self, z):
        zmax = z.max(axis=2, keepdims=True)
        ez = np.exp(z - zmax)
        soft = ez / ez.sum(axis=2, keepdims=True)
        feats = soft / np.linalg.norm(soft, axis=2, keepdims=True)
        sims = feats @ np.swapaxes(feats, 1, 2)
        st = np.clip(sims, losses.CLAMP_EPS, 1.0 - losses.CLAMP_EPS)
        pos = -(np.log(st) * self.sel_pos).sum(axis=(1, 2))
        neg = -(np.log1p(-st) * self.sel_neg).sum(axis=(1, 2))
        return (pos + self.lam * neg) / self.num_selected

    def losses_from(self, stage, x):
        """Per-group losses given grouped values of `stage`."""
        idx = _ORDER.index(stage)
        for s in _ORDER[idx:-1]:
            x = self._transition(s, x)
        return self._loss_from_z(x)

    # -- dense (whole-stage) patches -----------------------------------------

    def _dense_perturbed(self, name, coords, delta):
        stage = _DENSE_ENTRY[name]
        base = self.acts[stage]
        out = np.broadcast_to(base, (len(coords),) + base.shape).copy()
        if name in ("conv1_w", "conv4_w"):
            xp = self.padded[name[:-2]]
            length = base.shape[2]
            for g, (co, ci, kk) in enumerate(coords):
                out[g, :, co, :] += delta * xp[:, ci, kk:kk + length]
        elif name in ("conv1_b", "conv4_b"):
            for g, (co,) in enumerate(coords):
                out[g, :, co, :] += delta
        elif name in ("bn1_gamma", "bn4_gamma"):
            xhat = self.bn_xhat[name[:-6]]
            for g, (c,) in enumerate(coords):
                out[g, :, c, :] += delta * xhat[:, c, :]
        elif name in ("bn1_beta", "bn4_beta"):
            for g, (c,) in enumerate(coords):
                out[g, :, c, :] += delta
        elif name in ("dense1_w", "dense2_w"):
            xin = self.acts["flat"] if name == "dense1_w" else self.acts["rh"]
            for g, (o, i) in enumerate(coords):
                out[g, :, o] += delta * xin[:, i]
        elif name in ("dense1_b", "dense2_b"):
            for g, (o,) in enumerate(coords):
                out[g, :, o] += delta
        else:
            raise KeyError(name)
        return stage, out

    # -- channel-sparse patches for the middle conv blocks --------------------

    def _family_perturbed(self, name, coords, delta):
        """Propagate single-channel deltas through block `fam` and patch the
        following convolution's cached output."""
        fam, sub = _FAMILY[name]
        p = self.model.params
        if fam == 2:
            a_base, b_xhat, q_base = self.acts["a2"], self.bn_xhat["bn2"], self.acts["q2"]
            bn_g, bn_b = p["bn2_gamma"], p["bn2_beta"]
            bnp_name, conv_in_pad = "bn2p", self.padded["conv2"]
            next_w, next_out_stage = p["conv3_w"], "a3"
        else:
            a_base, b_xhat, q_base = self.acts["a3"], self.bn_xhat["bn3"], self.acts["q3"]
            bn_g, bn_b = p["bn3_gamma"], p["bn3_beta"]
            bnp_name, conv_in_pad = "bn3p", self.padded["conv3"]
            next_w, next_out_stage = p["conv4_w"], "a4"
        bnp_g = p[f"{bnp_name}_gamma"]
        bnp_b = p[f"{bnp_name}_beta"]
        bnp_xhat = self.bn_xhat[bnp_name]

        if sub == "a":  # conv weight or bias: perturb the conv output channel
            if name.endswith("_w"):
                chan = np.array([co for co, _, _ in coords])
                length = a_base.shape[2]
                pert = a_base[:, chan, :].transpose(1, 0, 2).copy()
                for g, (co, ci, kk) in enumerate(coords):
                    pert[g] += delta * conv_in_pad[:, ci, kk:kk + length]
            else:
                chan = np.array([co for (co,) in coords])
                pert = a_base[:, chan, :].transpose(1, 0, 2) + delta
            pert = _bn_channel(pert, bn_g[chan], bn_b[chan])
            pert = _pool(np.maximum(pert, 0.0))
            pert = _bn_channel(pert, bnp_g[chan], bnp_b[chan])
        elif sub == "b":  # bn gamma/beta: perturb the bn output channel
            chan = np.array([c for (c,) in coords])
            if name.endswith("_gamma"):
                pert = (bn_g[chan, None, None] + delta) * b_xhat[:, chan, :].transpose(1, 0, 2) \
                    + bn_b[chan, None, None]
            else:
                pert = bn_g[chan, None, None] * b_xhat[:, chan, :].transpose(1, 0, 2) \
                    + bn_b[chan, None, None] + delta
            pert = _pool(np.maximum(pert, 0.0))
            pert = _bn_channel(pert, bnp_g[chan], bnp_b[chan])
        else:  # post-pool bn gamma/beta: perturb its output channel directly
            chan = np.array([c for (c,) in coords])
            if name.endswith("_gamma"):
                pert = (bnp_g[chan, None, None] + delta) * bnp_xhat[:, chan, :].transpose(1, 0, 2) \
                    + bnp_b[chan, None, None]
            else:
                pert = bnp_g[chan, None, None] * bnp_xhat[:, chan, :].transpose(1, 0, 2) \
                    + bnp_b[chan, None, None] + delta

        dq = pert - q_base[:, chan, :].transpose(1, 0, 2)
        # next conv over a single input channel: cached output + w[:, chan] * dq
        pad = nn.KERNEL_SIZE // 2
        dq_pad = np.pad(dq, ((0, 0), (0, 0), (pad, pad)))
        win = sliding_window_view(dq_pad, nn.KERNEL_SIZE, axis=2)  # (E, m, L, K)
        w_sel = next_w[:, chan, :].transpose(1, 0, 2)  # (E, Cout, K)
        contrib = np.einsum("emtk,eok->emot", win, w_sel)
        base_next = self.acts[next_out_stage]
        return next_out_stage, base_next[None] + contrib

    def perturbed_stage(self, name, coords, delta):
        if name in _FAMILY:
            return self._family_perturbed(name, coords, delta)
        return self._dense_perturbed(name, coords, delta)

    def fd_gradient(self, name, step, chunk=512):
        """Central-difference gradient for every coordinate of tensor `name`."""
        shape = self.model.params[name].shape
        coords = list(np.ndindex(shape))
        grad = np.empty(len(coords))
        for lo in range(0, len(coords), chunk):
            part = coords[lo:lo + chunk]
            stage, plus = self.perturbed_stage(name, part, step)
            loss_p = self.losses_from(stage, plus)
            stage, minus = self.perturbed_stage(name, part, -step)
            loss_m = self.losses_from(stage, minus)
            grad[lo:lo + len(part)] = (loss_p - loss_m) / (2.0 * step)
        return grad.reshape(shape)

    # -- exactness verification ----------------------------------------------

    def production_loss_at(self, name, coord, delta):
        probe = self.model.copy()
        probe.params[name][coord] += delta
        feats = nn.forward(probe, self.batch, train_mode=True)
        return losses.pairwise_loss(losses.similarity_matrix(feats), self.pairs, self.lam).loss

    def verify(self, rng, per_tensor=2, step=1e-5, rtol=1e-9):
        """Grouped evaluation must reproduce the production forward's loss at
        perturbed points; returns the worst relative deviation seen."""
        worst = 0.0
        base = self.losses_from("a1", self.acts["a1"][None])[0]
        worst = max(worst, abs(base - self.base_loss) / max(abs(self.base_loss), 1e-12))
        for name, value in self.model.params.items():
            all_coords = list(np.ndindex(value.shape))
            picks = [all_coords[i] for i in
                     rng.choice(len(all_coords), size=min(per_tensor, len(all_coords)),
                                replace=False)]
            for coord in picks:
                for delta in (step, -step):
                    stage, patched = self.perturbed_stage(name, [coord], delta)
                    got = self.losses_from(stage, patched)[0]
                    want = self.production_loss_at(name, coord, delta)
                    worst = max(worst, abs(got - want) / max(abs(want), 1e-12))
        if worst > rtol:
            raise AssertionError(f"grouped evaluator deviates from production forward: {worst:.3e}")
        return worst
