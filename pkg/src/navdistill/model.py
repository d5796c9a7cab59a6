"""Dual-scale transformer navigator.

One parameterized implementation covers both the large frozen teacher and the
small student: a language self-attention encoder, a panorama encoder over K
angular views, and two cross-modal encoders — a coarse one over the growing
topological map and a fine one over the current panorama — whose action scores
are fused by a sigmoid gate.  Every encoder captures its per-block pre-softmax
attention scores, softmax probabilities, and hidden states so a distillation
loss can reach any intermediate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as ops
from .tensor import ShapeError, Tensor

STOP = -1

VISITED, CURRENT, GHOST = "visited", "current", "ghost"


class ConfigError(ValueError):
    pass


class TokenOutOfRange(ValueError):
    pass


class TooLong(ValueError):
    pass


class IllegalMove(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_lang_blocks: int
    n_pano_blocks: int
    n_cross_blocks: int   # shared by the coarse and fine encoders
    hidden_dim: int
    n_heads: int
    ffn_dim: int
    vocab_size: int
    max_instruction_len: int
    view_feature_dim: int
    n_objects: int

    def validate(self):
        counts = (self.n_lang_blocks, self.n_pano_blocks, self.n_cross_blocks)
        if any(c < 1 for c in counts):
            raise ConfigError(f"all block counts must be >= 1, got {counts}")
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        for name in ("hidden_dim", "n_heads", "ffn_dim", "vocab_size",
                     "max_instruction_len", "view_feature_dim", "n_objects"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self


TEACHER_CONFIG = ModelConfig(n_lang_blocks=9, n_pano_blocks=2, n_cross_blocks=4,
                             hidden_dim=128, n_heads=4, ffn_dim=256, vocab_size=52,
                             max_instruction_len=40, view_feature_dim=32, n_objects=16)
STUDENT_CONFIG = ModelConfig(n_lang_blocks=3, n_pano_blocks=1, n_cross_blocks=2,
                             hidden_dim=64, n_heads=4, ffn_dim=128, vocab_size=52,
                             max_instruction_len=40, view_feature_dim=32, n_objects=16)


# ---------------------------------------------------------------------------
# topological map


@dataclass
class TopoMap:
    """Roles, accumulated features, and explored edges of one episode.

    Features are stored as 1-D tensors so they can stay on the tape when the
    trainer wants gradients through history; ``freeze_features`` snaps them to
    constants between steps.
    """
    world: object                       # WorldGraph; read-only
    role: dict[int, str] = field(default_factory=dict)
    feature: dict[int, Tensor] = field(default_factory=dict)
    count: dict[int, int] = field(default_factory=dict)
    edges: dict[tuple[int, int], float] = field(default_factory=dict)
    step: int = 0
    current: int | None = None

    def node_ids(self) -> list[int]:
        return sorted(self.role)

    def ghosts(self) -> list[int]:
        return sorted(n for n, r in self.role.items() if r == GHOST)

    def freeze_features(self):
        for n, f in self.feature.items():
            self.feature[n] = Tensor(f.data.copy(), requires_grad=False)

    def check(self):
        currents = [n for n, r in self.role.items() if r == CURRENT]
        assert len(currents) == 1, currents


def update_topo_map(tmap: TopoMap, new_current: int, obs, h_t: Tensor) -> TopoMap:
    """Advance the map to ``new_current``.

    The departing node keeps the mean of its panorama rows as a visited
    feature; each neighbor seen from the new node becomes (or stays) a ghost
    whose feature is the running mean of the encoded view rows facing it.
    """
    w = tmap.world
    w.check_node(new_current)
    if tmap.current is not None:
        legal = tmap.role.get(new_current) == GHOST or \
            new_current in dict(w.adj[tmap.current])
        if not legal:
            raise IllegalMove(f"cannot move from {tmap.current} to {new_current}")
        tmap.role[tmap.current] = VISITED
    tmap.role[new_current] = CURRENT
    tmap.current = new_current
    tmap.count.pop(new_current, None)
    tmap.feature[new_current] = ops.mean_rows(h_t)
    for nb, view_idx in sorted(obs.neighbor_view_index.items()):
        a, b = min(new_current, nb), max(new_current, nb)
        tmap.edges[(a, b)] = w.edge_weight(new_current, nb)
        if tmap.role.get(nb, GHOST) != GHOST:
            continue
        row = ops.row(h_t, view_idx)
        c = tmap.count.get(nb, 0)
        if c == 0 or nb not in tmap.feature:
            tmap.role[nb] = GHOST
            tmap.feature[nb] = row
            tmap.count[nb] = 1
        else:
            mean = ops.add(ops.scale(tmap.feature[nb], c / (c + 1)),
                           ops.scale(row, 1.0 / (c + 1)))
            tmap.feature[nb] = mean
            tmap.count[nb] = c + 1
    tmap.step += 1
    return tmap


# ---------------------------------------------------------------------------
# captures and outputs


@dataclass
class EncoderCapture:
    scores: list[Tensor] = field(default_factory=list)   # pre-softmax, (h*S, S)
    probs: list[Tensor] = field(default_factory=list)    # softmaxed, rows sum to 1
    hiddens: list[Tensor] = field(default_factory=list)  # block outputs, (S, D)

    def __len__(self):
        return len(self.hiddens)


@dataclass
class CoarseOut:
    scores: Tensor            # (|N_t|+1,)  index 0 = STOP, then node_ids ascending
    node_ids: list[int]
    cls: Tensor               # (D,) STOP-token output; the fusion gate input
    f_c: Tensor               # (|N_t|+1, D)
    capture: EncoderCapture


@dataclass
class FineOut:
    scores: Tensor            # (K+1,)  index 0 = STOP, then the K views
    cls: Tensor               # (D,) STOP-token output; grounding query
    f_f: Tensor               # (K+1, D)
    capture: EncoderCapture


@dataclass
class FusedLogits:
    candidate_ids: list[int]  # [STOP] + ghost ids ascending
    z: Tensor                 # (len(candidate_ids),)
    lam: Tensor               # (1,) gate in (0, 1)


class DuetModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        D, F = cfg.hidden_dim, cfg.ffn_dim

        def mat(name, shape):
            self.params[name] = ops.xavier_uniform(rng, shape)

        def vec(name, n):
            self.params[name] = Tensor(0.02 * rng.standard_normal(n), requires_grad=True)

        def bias(name, n):
            self.params[name] = ops.zeros((n,))

        def gain(name, n):
            self.params[name] = Tensor(np.ones(n), requires_grad=True)

        def attn(prefix):
            for nm in ("wq", "wk", "wv", "wo"):
                mat(f"{prefix}.{nm}", (D, D))
            for nm in ("bq", "bk", "bv", "bo"):
                bias(f"{prefix}.{nm}", D)

        def ln(prefix):
            gain(f"{prefix}.g", D)
            bias(f"{prefix}.b", D)

        def ffn(prefix):
            mat(f"{prefix}.w1", (D, F))
            bias(f"{prefix}.b1", F)
            mat(f"{prefix}.w2", (F, D))
            bias(f"{prefix}.b2", D)

        def self_block(prefix):
            attn(f"{prefix}.attn")
            ln(f"{prefix}.ln1")
            ffn(f"{prefix}.ffn")
            ln(f"{prefix}.ln2")

        def cross_block(prefix):
            attn(f"{prefix}.xattn")
            ln(f"{prefix}.lnx")
            attn(f"{prefix}.sattn")
            ln(f"{prefix}.lns")
            ffn(f"{prefix}.ffn")
            ln(f"{prefix}.lnf")

        mat("embed.token", (cfg.vocab_size, D))
        mat("embed.pos", (cfg.max_instruction_len, D))
        for i in range(cfg.n_lang_blocks):
            self_block(f"lang.block.{i}")
        mat("pano.proj.w", (cfg.view_feature_dim, D))
        bias("pano.proj.b", D)
        vec("pano.type", D)
        mat("pano.loc.w", (2, D))
        bias("pano.loc.b", D)
        for i in range(cfg.n_pano_blocks):
            self_block(f"pano.block.{i}")
        for enc in ("coarse", "fine"):
            vec(f"{enc}.stop", D)
            for i in range(cfg.n_cross_blocks):
                cross_block(f"{enc}.block.{i}")
            mat(f"{enc}.score.w", (D, 1))
            bias(f"{enc}.score.b", 1)
        mat("fuse.gate.w", (D, 1))
        bias("fuse.gate.b", 1)
        mat("itm.w", (D, 2))
        bias("itm.b", 2)
        mat("ground.obj", (cfg.n_objects, D))

    # -- parameter plumbing ------------------------------------------------

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def copy_params_from(self, other: "DuetModel"):
        if set(self.params) != set(other.params):
            raise ShapeError("parameter tables differ")
        for name, p in self.params.items():
            q = other.params[name]
            if p.data.shape != q.data.shape:
                raise ShapeError(f"{name}: {p.data.shape} vs {q.data.shape}")
            p.data = q.data.copy()
        return self

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- sublayers ----------------------------------------------------------

    def _attn(self, prefix, x, context=None, capture: EncoderCapture | None = None):
        p = self.params
        kv = x if context is None else context
        q = ops.affine(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
        k = ops.affine(kv, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
        v = ops.affine(kv, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
        scores = ops.head_scores(q, k, self.cfg.n_heads)
        probs = ops.softmax_rows(scores)
        mixed = ops.head_mix(probs, v, self.cfg.n_heads)
        out = ops.affine(mixed, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
        if capture is not None:
            capture.scores.append(scores)
            capture.probs.append(probs)
        return out

    def _ffn(self, prefix, x):
        p = self.params
        h = ops.gelu(ops.affine(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return ops.affine(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _ln(self, prefix, x):
        p = self.params
        return ops.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])

    def _self_block(self, prefix, x, capture):
        x = self._ln(f"{prefix}.ln1", ops.add(x, self._attn(f"{prefix}.attn", x,
                                                            capture=capture)))
        x = self._ln(f"{prefix}.ln2", ops.add(x, self._ffn(f"{prefix}.ffn", x)))
        capture.hiddens.append(x)
        return x

    def _cross_block(self, prefix, x, context, capture):
        x = self._ln(f"{prefix}.lnx", ops.add(x, self._attn(f"{prefix}.xattn", x,
                                                            context=context)))
        x = self._ln(f"{prefix}.lns", ops.add(x, self._attn(f"{prefix}.sattn", x,
                                                            capture=capture)))
        x = self._ln(f"{prefix}.lnf", ops.add(x, self._ffn(f"{prefix}.ffn", x)))
        capture.hiddens.append(x)
        return x

    # -- encoders -----------------------------------------------------------

    def embed_instruction(self, tokens) -> Tensor:
        tokens = list(tokens)
        if len(tokens) > self.cfg.max_instruction_len:
            raise TooLong(f"{len(tokens)} tokens > max {self.cfg.max_instruction_len}")
        if len(tokens) == 0:
            raise TooLong("empty instruction")
        for t in tokens:
            if not 0 <= t < self.cfg.vocab_size:
                raise TokenOutOfRange(f"token {t} outside vocab of {self.cfg.vocab_size}")
        tok = ops.take_rows(self.params["embed.token"], tokens)
        pos = ops.take_rows(self.params["embed.pos"], list(range(len(tokens))))
        return ops.add(tok, pos)

    def encode_instruction(self, E: Tensor) -> tuple[Tensor, EncoderCapture]:
        cap = EncoderCapture()
        x = E
        for i in range(self.cfg.n_lang_blocks):
            x = self._self_block(f"lang.block.{i}", x, cap)
        return x, cap

    def encode_panorama(self, obs, rel_position) -> tuple[Tensor, EncoderCapture]:
        views = np.asarray(obs.views, dtype=float)
        if views.ndim != 2 or views.shape[1] != self.cfg.view_feature_dim:
            raise ShapeError(f"views {views.shape} vs D_v={self.cfg.view_feature_dim}")
        rel = np.asarray(rel_position, dtype=float).reshape(1, 2)
        x = ops.affine(Tensor(views, requires_grad=False),
                       self.params["pano.proj.w"], self.params["pano.proj.b"])
        x = ops.add(x, self.params["pano.type"])
        loc = ops.affine(Tensor(rel, requires_grad=False),
                         self.params["pano.loc.w"], self.params["pano.loc.b"])
        x = ops.add(x, ops.flatten(loc))
        cap = EncoderCapture()
        for i in range(self.cfg.n_pano_blocks):
            x = self._self_block(f"pano.block.{i}", x, cap)
        return x, cap

    def coarse_forward(self, f_L: Tensor, tmap: TopoMap) -> CoarseOut:
        node_ids = tmap.node_ids()
        rows = [self.params["coarse.stop"]] + [tmap.feature[n] for n in node_ids]
        x = ops.stack_rows(rows)
        cap = EncoderCapture()
        for i in range(self.cfg.n_cross_blocks):
            x = self._cross_block(f"coarse.block.{i}", x, f_L, cap)
        scores = ops.flatten(ops.affine(x, self.params["coarse.score.w"],
                                        self.params["coarse.score.b"]))
        return CoarseOut(scores=scores, node_ids=node_ids, cls=ops.row(x, 0),
                         f_c=x, capture=cap)

    def fine_forward(self, f_L: Tensor, h_t: Tensor) -> FineOut:
        stop = ops.stack_rows([self.params["fine.stop"]])
        x = ops.concat_rows([stop, h_t])
        cap = EncoderCapture()
        for i in range(self.cfg.n_cross_blocks):
            x = self._cross_block(f"fine.block.{i}", x, f_L, cap)
        scores = ops.flatten(ops.affine(x, self.params["fine.score.w"],
                                        self.params["fine.score.b"]))
        return FineOut(scores=scores, cls=ops.row(x, 0), f_f=x, capture=cap)

    # -- action scoring -----------------------------------------------------

    def fuse_scores(self, coarse: CoarseOut, fine: FineOut, tmap: TopoMap,
                    neighbor_view_index: dict[int, int]) -> FusedLogits:
        gate_in = ops.stack_rows([coarse.cls])
        lam = ops.sigmoid(ops.flatten(ops.affine(
            gate_in, self.params["fuse.gate.w"], self.params["fuse.gate.b"])))
        one_minus = ops.add(ops.scale(lam, -1.0), Tensor(np.ones(1), requires_grad=False))
        ghosts = tmap.ghosts()
        coarse_index = {n: i + 1 for i, n in enumerate(coarse.node_ids)}
        parts = []
        # STOP first, then ghosts ascending: argmax ties resolve to the lowest id
        both = ops.add(ops.mul(lam, ops.take(coarse.scores, [0])),
                       ops.mul(one_minus, ops.take(fine.scores, [0])))
        parts.append(both)
        for g in ghosts:
            c = ops.mul(lam, ops.take(coarse.scores, [coarse_index[g]]))
            if g in neighbor_view_index:
                f = ops.mul(one_minus,
                            ops.take(fine.scores, [1 + neighbor_view_index[g]]))
                parts.append(ops.add(c, f))
            else:
                parts.append(c)   # coarse-only for ghosts outside the local panorama
        z = ops.concat_vec(parts)
        if not np.all(np.isfinite(z.data)):
            raise ShapeError("non-finite fused logits")
        return FusedLogits(candidate_ids=[STOP] + ghosts, z=z, lam=lam)

    def predict_action(self, fused: FusedLogits, mode: str = "greedy",
                       rng: np.random.Generator | None = None) -> int:
        if mode == "greedy":
            return fused.candidate_ids[int(np.argmax(fused.z.data))]
        if mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            zs = fused.z.data - fused.z.data.max()
            p = np.exp(zs)
            p /= p.sum()
            return int(rng.choice(fused.candidate_ids, p=p))
        raise ValueError(f"unknown mode {mode!r}")

    def itm_logits(self, cls: Tensor) -> Tensor:
        x = ops.stack_rows([cls])
        return ops.flatten(ops.affine(x, self.params["itm.w"], self.params["itm.b"]))

    def ground_scores(self, cls: Tensor, object_ids: list[int]) -> np.ndarray:
        """Dot products between candidate object embeddings and the fine STOP
        output; evaluation only, so plain arrays suffice."""
        table = self.params["ground.obj"].data
        return table[list(object_ids)] @ cls.data


# ---------------------------------------------------------------------------
# parameter accounting


def _self_block_params(d: int, f: int) -> int:
    attn = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    return attn + ffn + 2 * (2 * d)          # plus two layer norms


def _cross_block_params(d: int, f: int) -> int:
    attn = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    return 2 * attn + ffn + 3 * (2 * d)      # cross-attn, self-attn, three norms


def param_count(cfg: ModelConfig) -> int:
    """Closed-form size of the parameter table (verified against enumeration)."""
    d, f = cfg.hidden_dim, cfg.ffn_dim
    total = cfg.vocab_size * d + cfg.max_instruction_len * d
    total += cfg.n_lang_blocks * _self_block_params(d, f)
    total += cfg.view_feature_dim * d + d      # view projection
    total += d                                 # type embedding
    total += 2 * d + d                         # location embedding
    total += cfg.n_pano_blocks * _self_block_params(d, f)
    for _ in ("coarse", "fine"):
        total += d                             # stop token
        total += cfg.n_cross_blocks * _cross_block_params(d, f)
        total += d + 1                         # score head
    total += d + 1                             # fusion gate
    total += 2 * d + 2                         # match head
    total += cfg.n_objects * d                 # object embeddings
    return total
