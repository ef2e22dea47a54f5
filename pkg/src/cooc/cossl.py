"""Co-occurrence self-supervised learning: dual networks and losses.

An online network (backbone, projection heads, prediction heads) is trained
by gradient descent; a target network (backbone plus projection heads) is an
exponential moving average of the online weights and never receives
gradients. The global loss pulls the online prediction of one view toward
the target projection of the other. The local loss additionally pairs every
pre-pool grid cell with the opposite view's global vector, in both
directions, and is weighted by ``w_s``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor
from .rf import Backbone


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

class ProjectionMlp(nn.Module):
    """Linear -> BN -> ReLU (x depth) -> Linear, BYOL-style."""

    def __init__(self, in_features, hidden, out, depth=1, rng=None, dtype=np.float32):
        if depth < 1:
            raise ValueError("projection depth must be at least 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        layers = []
        width = in_features
        for _ in range(depth):
            layers += [
                nn.Linear(width, hidden, bias=True, rng=rng, dtype=dtype),
                nn.BatchNorm1d(hidden, dtype=dtype),
                nn.ReLU(),
            ]
            width = hidden
        layers.append(nn.Linear(width, out, bias=True, rng=rng, dtype=dtype))
        self.net = nn.Sequential(*layers)
        self.out_features = out

    def forward(self, x, mode="train", linearize=False):
        return self.net(x, mode=mode, linearize=linearize)


def clone_frozen(module):
    """Deep copy with every parameter detached from training."""
    twin = copy.deepcopy(module)
    for _, p in twin.named_parameters():
        p.requires_grad = False
        p.grad = None
        p._node = None
    return twin


# ---------------------------------------------------------------------------
# grid plumbing
# ---------------------------------------------------------------------------

def grid_to_rows(grid):
    """N x C x n x n -> (N*n*n) x C, cells in row-major order per sample."""
    n_im, c, h, w = grid.data.shape
    if h != w:
        raise ValueError(f"expected a square grid, got {h}x{w}")
    moved = T.transpose(grid, (0, 2, 3, 1))
    return T.reshape(moved, (n_im * h * w, c)), h


def downsample_local_grid(grid, side):
    """Average-pool an N x C x n x n grid down to side x side cells."""
    n = grid.data.shape[2]
    if grid.data.shape[3] != n:
        raise ValueError("expected a square grid")
    if side == n:
        return grid
    if side < 1 or n % side != 0:
        raise ValueError(f"grid side {n} is not an integer multiple of target {side}")
    window = n // side
    return T.avg_pool2d(grid, window, window)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_global(p, z):
    """-2 * cosine(p, sg(z)), averaged over the batch."""
    if p.data.shape != z.data.shape:
        raise ValueError(f"global loss shape mismatch: {p.data.shape} vs {z.data.shape}")
    return T.mul(T.tensor_mean(T.cosine_similarity(p, T.stop_gradient(z))), -2.0)


def loss_local(p_rows, z_g, p_g, z_rows, side):
    """Local-global pairing for one direction.

    ``p_rows``/``z_rows`` are flattened grids ((N*side^2) x D) of online
    predictions and target projections, ``p_g``/``z_g`` the matching global
    vectors (N x D). Every cell is paired with the opposite view's global
    vector, both ways, and the cell average is scaled by -2.
    """
    n_im, d = p_g.data.shape
    cells = side * side
    if p_rows.data.shape != (n_im * cells, d) or z_rows.data.shape != (n_im * cells, d):
        raise ValueError(
            f"local loss expects {(n_im * cells, d)} rows, got "
            f"{p_rows.data.shape} and {z_rows.data.shape}"
        )
    cell_to_global = T.cosine_similarity(p_rows, T.repeat_rows(T.stop_gradient(z_g), cells))
    global_to_cell = T.cosine_similarity(T.repeat_rows(p_g, cells), T.stop_gradient(z_rows))
    paired = T.add(T.tensor_mean(cell_to_global), T.tensor_mean(global_to_cell))
    return T.mul(paired, -2.0)


# ---------------------------------------------------------------------------
# dual networks
# ---------------------------------------------------------------------------

@dataclass
class ViewOutputs:
    p_g: tuple      # online global predictions, one per view
    z_g: tuple      # target global projections, one per view
    p_rows: tuple   # online local prediction rows per view (None when local is off)
    z_rows: tuple   # target local projection rows per view (None when local is off)
    side: int       # grid side after any downsampling (0 when local is off)


class DualNetworks(nn.Module):
    """Online and target networks plus the loss wiring between them."""

    def __init__(
        self,
        backbone: Backbone,
        proj_hidden=4096,
        proj_out=256,
        local_hidden=None,
        local_out=None,
        proj_depth=1,
        tau=0.99,
        w_s=0.5,
        grid_target=None,
        shared_local_head=False,
        rng=None,
        dtype=np.float32,
    ):
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if w_s < 0.0:
            raise ValueError("w_s must be nonnegative")
        rng = rng if rng is not None else np.random.default_rng(0)
        local_hidden = proj_hidden if local_hidden is None else local_hidden
        local_out = proj_out if local_out is None else local_out
        if w_s > 0.0 and local_out != proj_out:
            raise ValueError(
                "the local loss pairs cell vectors with global vectors, so the "
                f"head output widths must match ({local_out} vs {proj_out})"
            )
        feats = backbone.features
        self.tau = float(tau)
        self.w_s = float(w_s)
        self.grid_target = grid_target
        self.shared_local_head = bool(shared_local_head)

        self.backbone = backbone
        self.g1 = ProjectionMlp(feats, proj_hidden, proj_out, depth=proj_depth, rng=rng, dtype=dtype)
        self.q1 = ProjectionMlp(proj_out, proj_hidden, proj_out, depth=proj_depth, rng=rng, dtype=dtype)
        if shared_local_head:
            self.g2 = self.g1
            self.q2 = self.q1
        else:
            self.g2 = ProjectionMlp(feats, local_hidden, local_out, depth=proj_depth, rng=rng, dtype=dtype)
            self.q2 = ProjectionMlp(local_out, local_hidden, local_out, depth=proj_depth, rng=rng, dtype=dtype)

        self.target_backbone = clone_frozen(backbone)
        self.target_g1 = clone_frozen(self.g1)
        self.target_g2 = self.target_g1 if shared_local_head else clone_frozen(self.g2)

    # predictors have no target-side twin: only modules the target mirrors
    def module_pairs(self):
        pairs = [(self.backbone, self.target_backbone), (self.g1, self.target_g1)]
        if not self.shared_local_head:
            pairs.append((self.g2, self.target_g2))
        return pairs

    def online_modules(self):
        mods = [self.backbone, self.g1, self.q1]
        if not self.shared_local_head:
            mods += [self.g2, self.q2]
        return mods

    def online_parameters(self):
        seen = []
        for mod in self.online_modules():
            seen.extend(p for _, p in mod.named_parameters())
        return seen

    def _local_rows(self, out, g, q, mode):
        grid = out.local
        if self.grid_target is not None:
            grid = downsample_local_grid(grid, self.grid_target)
        rows, side = grid_to_rows(grid)
        proj = g(rows, mode=mode)
        if q is not None:
            proj = q(proj, mode=mode)
        return proj, side

    def forward_views(self, v1, v2, mode="train", with_local=None):
        """Run both views through both networks.

        ``with_local`` defaults to ``w_s > 0``; when off, the local heads are
        never touched so the w_s = 0 path is bit-identical to plain BYOL.
        """
        if with_local is None:
            with_local = self.w_s > 0.0
        v1 = v1 if isinstance(v1, Tensor) else Tensor(v1)
        v2 = v2 if isinstance(v2, Tensor) else Tensor(v2)
        if v1.data.shape != v2.data.shape:
            raise ValueError(f"view shape mismatch: {v1.data.shape} vs {v2.data.shape}")

        p_g, p_rows, sides = [], [], []
        for v in (v1, v2):
            out = self.backbone(v, mode=mode)
            p_g.append(self.q1(self.g1(out.global_, mode=mode), mode=mode))
            if with_local:
                rows, side = self._local_rows(out, self.g2, self.q2, mode)
                p_rows.append(rows)
                sides.append(side)
            else:
                p_rows.append(None)

        z_g, z_rows = [], []
        with T.no_grad():
            for v in (v1, v2):
                out = self.target_backbone(v, mode=mode)
                z_g.append(self.target_g1(out.global_, mode=mode))
                if with_local:
                    rows, side = self._local_rows(out, self.target_g2, None, mode)
                    z_rows.append(rows)
                else:
                    z_rows.append(None)

        return ViewOutputs(
            p_g=tuple(p_g),
            z_g=tuple(z_g),
            p_rows=tuple(p_rows),
            z_rows=tuple(z_rows),
            side=sides[0] if sides else 0,
        )

    def loss_total(self, outputs: ViewOutputs):
        """Symmetrized global loss plus w_s times the symmetrized local loss.

        Returns (total, global part, local part); the local part is None when
        w_s = 0 and the loss graph is exactly the plain BYOL one.
        """
        l_g = T.add(
            loss_global(outputs.p_g[0], outputs.z_g[1]),
            loss_global(outputs.p_g[1], outputs.z_g[0]),
        )
        if self.w_s == 0.0:
            return l_g, l_g, None
        if outputs.p_rows[0] is None:
            raise ValueError("w_s > 0 but the forward pass skipped the local heads")
        l_l = T.add(
            loss_local(outputs.p_rows[0], outputs.z_g[1], outputs.p_g[0], outputs.z_rows[1], outputs.side),
            loss_local(outputs.p_rows[1], outputs.z_g[0], outputs.p_g[1], outputs.z_rows[0], outputs.side),
        )
        return T.add(l_g, T.mul(l_l, self.w_s)), l_g, l_l

    def ema_update(self, tau=None):
        """xi <- tau * xi + (1 - tau) * theta for every mirrored parameter."""
        tau = self.tau if tau is None else float(tau)
        for online, target in self.module_pairs():
            ours = list(online.named_parameters())
            theirs = list(target.named_parameters())
            if len(ours) != len(theirs):
                raise ValueError("online/target parameter lists diverged")
            for (name_o, p_o), (name_t, p_t) in zip(ours, theirs):
                if name_o != name_t or p_o.data.shape != p_t.data.shape:
                    raise ValueError(
                        f"online/target mismatch at {name_o!r} vs {name_t!r}"
                    )
                p_t.data *= tau
                p_t.data += (1.0 - tau) * p_o.data
