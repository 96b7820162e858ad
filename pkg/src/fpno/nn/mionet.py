"""Multi-input operator network: branch x feature-branch x trunk."""

from __future__ import annotations

import numpy as np

from ..exceptions import DimensionError, StateError
from .layers import Module, resnet


class MioNet(Module):
    """``out[b, k, c] = sum_i B(u_b)[c, i] * Bf(z_b)[i] * T(x_k)[i]``.

    The branch emits ``ncomp * latent`` coefficients, one block of ``latent``
    per field component. Outputs are flattened node-major, matching the
    interleaved dof ordering.
    """

    def __init__(self, branch_widths, feature_widths, trunk_widths, latent, ncomp=1,
                 reduction=4, rng=None):
        if branch_widths[-1] != ncomp * latent:
            raise DimensionError("branch output must equal ncomp * latent")
        if feature_widths[-1] != latent or trunk_widths[-1] != latent:
            raise DimensionError("feature and trunk outputs must equal latent")
        self.latent = latent
        self.ncomp = ncomp
        self.branch = resnet(branch_widths, se=True, reduction=reduction, rng=rng)
        self.feature = resnet(feature_widths, se=True, reduction=reduction, rng=rng)
        self.trunk = resnet(trunk_widths, se=False, rng=rng)
        self._cache = None

    def parameters(self):
        return self.branch.parameters() + self.feature.parameters() + self.trunk.parameters()

    def gradients(self):
        return self.branch.gradients() + self.feature.gradients() + self.trunk.gradients()

    def combine(self, b, f, t):
        """Fuse latent outputs: ``b (B, ncomp, p)``, ``f (B, p)``, ``t (K, p)``."""
        return np.einsum("bci,bi,ki->bkc", b, f, t, optimize=True)

    def forward(self, u, zeta, coords):
        u = np.atleast_2d(u)
        zeta = np.atleast_2d(zeta)
        if len(u) != len(zeta):
            raise DimensionError("branch and feature batches differ in size")
        b = self.branch.forward(u).reshape(len(u), self.ncomp, self.latent)
        f = self.feature.forward(zeta)
        t = self.trunk.forward(np.asarray(coords, dtype=float))
        self._cache = (b, f, t)
        return self.combine(b, f, t).reshape(len(u), -1)

    def backward(self, dout):
        if self._cache is None:
            raise StateError("backward called before forward")
        b, f, t = self._cache
        g = dout.reshape(len(b), len(t), self.ncomp)
        gt = np.einsum("bkc,ki->bci", g, t, optimize=True)
        db = gt * f[:, None, :]
        df = np.einsum("bci,bci->bi", gt, b)
        dt = np.einsum("bkc,bci,bi->ki", g, b, f, optimize=True)
        self.branch.backward(db.reshape(len(b), -1))
        self.feature.backward(df)
        self.trunk.backward(dt)
