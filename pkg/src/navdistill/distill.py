"""Knowledge distillation: layer mapping, projections, losses, and trainers.

Stage one (pre-training) distills instruction embeddings plus per-block
attention scores and hidden states along teacher-forced oracle trajectories,
next to the student's own action-prediction and instruction-trajectory-match
tasks.  Stage two (fine-tuning) distills encoded-instruction features,
panorama features, and fused action logits while the student rolls out its
own trajectories; the teacher is evaluated on the student's states so the
two candidate sets always align.

The teacher is frozen throughout; its forward passes build no tape, and the
pre-training trainer memoizes them per (episode, step) since teacher-forced
inputs never change.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as ops
from . import world as W
from .optim import Adam
from .tensor import ShapeError, Tensor

LANGUAGE, PANORAMA, CROSS_COARSE, CROSS_FINE = \
    "language", "panorama", "cross_coarse", "cross_fine"
KINDS = (LANGUAGE, PANORAMA, CROSS_COARSE, CROSS_FINE)


class OutOfRange(ValueError):
    pass


class IncompatibleDepths(ValueError):
    pass


class CandidateSetMismatch(ValueError):
    pass


# default depths: teacher 9/2/4 blocks, student 3/1/2
_DEFAULT_DEPTHS = {LANGUAGE: (3, 9), PANORAMA: (1, 2),
                   CROSS_COARSE: (2, 4), CROSS_FINE: (2, 4)}


def layer_map(kind: str, m: int, n_student: int | None = None,
              n_teacher: int | None = None) -> int:
    """Teacher block h(m) imitated by student block m (uniform stride)."""
    if kind not in KINDS:
        raise OutOfRange(f"unknown encoder kind {kind!r}")
    if n_student is None or n_teacher is None:
        n_student, n_teacher = _DEFAULT_DEPTHS[kind]
    if n_teacher % n_student != 0:
        raise IncompatibleDepths(
            f"{kind}: teacher depth {n_teacher} not a multiple of student {n_student}")
    if not 1 <= m <= n_student:
        raise OutOfRange(f"student block {m} outside [1, {n_student}]")
    return m * (n_teacher // n_student)


@dataclass(frozen=True)
class LayerMap:
    kind: str
    entries: dict[int, int]

    @classmethod
    def build(cls, kind: str, n_student: int, n_teacher: int) -> "LayerMap":
        return cls(kind, {m: layer_map(kind, m, n_student, n_teacher)
                          for m in range(1, n_student + 1)})


class Projections:
    """Learnable student-width to teacher-width maps, trained with the student."""

    def __init__(self, student_cfg: M.ModelConfig, teacher_cfg: M.ModelConfig,
                 seed: int):
        rng = np.random.default_rng(seed)
        ds, dt = student_cfg.hidden_dim, teacher_cfg.hidden_dim
        self.tensors: dict[str, Tensor] = {"w_e": ops.xavier_uniform(rng, (ds, dt))}
        depths = {LANGUAGE: student_cfg.n_lang_blocks,
                  PANORAMA: student_cfg.n_pano_blocks,
                  CROSS_COARSE: student_cfg.n_cross_blocks,
                  CROSS_FINE: student_cfg.n_cross_blocks}
        for kind in KINDS:
            for m in range(1, depths[kind] + 1):
                self.tensors[f"w_h.{kind}.{m}"] = ops.xavier_uniform(rng, (ds, dt))
        self.tensors["w_l"] = ops.xavier_uniform(rng, (ds, dt))
        self.tensors["w_r"] = ops.xavier_uniform(rng, (ds, dt))

    @property
    def w_e(self) -> Tensor:
        return self.tensors["w_e"]

    @property
    def w_l(self) -> Tensor:
        return self.tensors["w_l"]

    @property
    def w_r(self) -> Tensor:
        return self.tensors["w_r"]

    def w_h(self, kind: str, m: int) -> Tensor:
        return self.tensors[f"w_h.{kind}.{m}"]

    def set_identity(self):
        for name, t in self.tensors.items():
            if t.data.shape[0] != t.data.shape[1]:
                raise ShapeError(f"{name} is not square; identity needs equal widths")
            t.data = np.eye(t.data.shape[0])
        return self


@dataclass
class DistillPlan:
    stage: str = "pretrain"              # pretrain | finetune
    kd_weight: float = 0.1
    temperature: float = 1.0
    emb: bool = True
    attn: bool = True
    hidn: bool = True
    txt: bool = True
    pano: bool = True
    fuse: bool = True

    def validate(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.temperature <= 0:
            raise ops.NonPositiveTemperature(f"t={self.temperature}")
        if self.kd_weight < 0:
            raise ValueError(f"kd_weight must be >= 0, got {self.kd_weight}")
        return self

    def any_pretrain_kd(self) -> bool:
        return self.emb or self.attn or self.hidn

    def any_finetune_kd(self) -> bool:
        return self.txt or self.pano or self.fuse


# ---------------------------------------------------------------------------
# loss primitives


def embed_distill_loss(e_tea: Tensor, e_stu: Tensor, w_e: Tensor) -> Tensor:
    return ops.mse(e_tea, ops.matmul(e_stu, w_e))


def attn_distill_loss(a_tea: Tensor, a_stu: Tensor, n_heads: int) -> Tensor:
    """Mean of per-head MSEs over pre-softmax scaled scores.

    Heads are stacked row-major into one (h*S, S) matrix, so the per-head
    average equals a single MSE over the stack.
    """
    if a_tea.shape != a_stu.shape:
        raise ShapeError(f"attention shapes differ: {a_tea.shape} vs {a_stu.shape}")
    if a_tea.shape[0] % n_heads != 0:
        raise ShapeError(f"{a_tea.shape[0]} rows not divisible by {n_heads} heads")
    return ops.mse(a_tea, a_stu)


def hidden_distill_loss(h_tea: Tensor, h_stu: Tensor, w_h: Tensor) -> Tensor:
    return ops.mse(h_tea, ops.matmul(h_stu, w_h))


def block_distill_loss(m: int, kind: str, tea_cap: M.EncoderCapture,
                       stu_cap: M.EncoderCapture, w_h: Tensor, n_heads: int,
                       attn: bool = True, hidn: bool = True) -> Tensor:
    h = layer_map(kind, m, len(stu_cap.hiddens), len(tea_cap.hiddens))
    parts = []
    if attn:
        parts.append(attn_distill_loss(tea_cap.scores[h - 1],
                                       stu_cap.scores[m - 1], n_heads))
    if hidn:
        parts.append(hidden_distill_loss(tea_cap.hiddens[h - 1],
                                         stu_cap.hiddens[m - 1], w_h))
    if not parts:
        return Tensor(np.zeros(1), requires_grad=False)
    total = parts[0]
    for p in parts[1:]:
        total = ops.add(total, p)
    return total


@dataclass
class NavPass:
    """Everything one forward pass exposes to the distillation losses."""
    E: Tensor | None
    f_L: Tensor
    h_t: Tensor | None
    lang: M.EncoderCapture
    pano: M.EncoderCapture
    coarse: M.EncoderCapture
    fine: M.EncoderCapture
    logits: Tensor | None = None
    candidate_ids: list[int] | None = None
    cls_coarse: Tensor | None = None
    cls_fine: Tensor | None = None
    n_heads: int = 0

    def capture(self, kind: str) -> M.EncoderCapture:
        return {LANGUAGE: self.lang, PANORAMA: self.pano,
                CROSS_COARSE: self.coarse, CROSS_FINE: self.fine}[kind]


def pretrain_kd_terms(tea: NavPass, stu: NavPass, proj: Projections,
                      plan: DistillPlan) -> dict[str, Tensor]:
    """Embedding loss plus one block loss per student block per encoder."""
    terms: dict[str, Tensor] = {}
    if plan.emb:
        terms["emb"] = embed_distill_loss(tea.E, stu.E, proj.w_e)
    if not (plan.attn or plan.hidn):
        return terms
    if tea.n_heads != stu.n_heads:
        raise ShapeError(f"head counts differ: {tea.n_heads} vs {stu.n_heads}")
    for kind in KINDS:
        t_cap, s_cap = tea.capture(kind), stu.capture(kind)
        for m in range(1, len(s_cap.hiddens) + 1):
            terms[f"{kind}.{m}"] = block_distill_loss(
                m, kind, t_cap, s_cap, proj.w_h(kind, m), stu.n_heads,
                attn=plan.attn, hidn=plan.hidn)
    return terms


def pretrain_kd_loss(tea: NavPass, stu: NavPass, proj: Projections,
                     plan: DistillPlan) -> Tensor:
    terms = pretrain_kd_terms(tea, stu, proj, plan)
    if not terms:
        return Tensor(np.zeros(1), requires_grad=False)
    total = None
    for t in terms.values():
        total = t if total is None else ops.add(total, t)
    return total


def finetune_kd_terms(tea: NavPass, stu: NavPass, proj: Projections,
                      plan: DistillPlan) -> dict[str, Tensor]:
    terms: dict[str, Tensor] = {}
    if plan.txt:
        terms["txt"] = ops.mse(tea.f_L, ops.matmul(stu.f_L, proj.w_l))
    if plan.pano:
        terms["pano"] = ops.mse(tea.h_t, ops.matmul(stu.h_t, proj.w_r))
    if plan.fuse:
        if tea.candidate_ids != stu.candidate_ids:
            raise CandidateSetMismatch(
                f"teacher {tea.candidate_ids} vs student {stu.candidate_ids}")
        terms["fuse"] = ops.soft_cross_entropy(tea.logits, stu.logits,
                                               plan.temperature)
    return terms


def finetune_kd_loss(tea: NavPass, stu: NavPass, proj: Projections,
                     plan: DistillPlan) -> Tensor:
    terms = finetune_kd_terms(tea, stu, proj, plan)
    if not terms:
        return Tensor(np.zeros(1), requires_grad=False)
    total = None
    for t in terms.values():
        total = t if total is None else ops.add(total, t)
    return total


# ---------------------------------------------------------------------------
# forward-pass assembly shared by both stages


def observation_seed(ep: W.Episode, step: int) -> int:
    return ep.seed * 101 + step


def teacher_forced_pass(model: M.DuetModel, g: W.WorldGraph, ep: W.Episode,
                        t: int, instruction=None,
                        path: list[int] | None = None) -> tuple[NavPass, M.TopoMap]:
    """Replay the forced prefix path[:t+1] and score the step at node t.

    ``path`` defaults to the oracle demonstration; pass a different
    trajectory (e.g. a teacher rollout) to force along it instead.
    """
    forced = ep.oracle_path if path is None else path
    instr = ep.instruction if instruction is None else instruction
    E = model.embed_instruction(instr)
    f_L, lang_cap = model.encode_instruction(E)
    tmap = M.TopoMap(world=g)
    start = forced[0]
    h_t = None
    pano_cap = None
    obs = None
    for i in range(t + 1):
        node = forced[i]
        obs = W.render_observation(g, node, noise_seed=observation_seed(ep, i))
        rel = (g.positions[node] - g.positions[start]) / g.extent
        h_t, pano_cap = model.encode_panorama(obs, rel)
        M.update_topo_map(tmap, node, obs, h_t)
    co = model.coarse_forward(f_L, tmap)
    fi = model.fine_forward(f_L, h_t)
    fl = model.fuse_scores(co, fi, tmap, obs.neighbor_view_index)
    nav = NavPass(E=E, f_L=f_L, h_t=h_t, lang=lang_cap, pano=pano_cap,
                  coarse=co.capture, fine=fi.capture, logits=fl.z,
                  candidate_ids=fl.candidate_ids, cls_coarse=co.cls,
                  cls_fine=fi.cls, n_heads=model.cfg.n_heads)
    return nav, tmap


def sap_target_index(nav: NavPass, g: W.WorldGraph, current: int,
                     goal: int) -> int | None:
    """Candidate index of the oracle action, or None when unavailable."""
    action = W.oracle_next_action(g, current, goal)
    try:
        return nav.candidate_ids.index(action)
    except ValueError:
        return None


# cached teacher activations, keyed by (episode seed, step); float32 to keep
# a few hundred entries under control


def _shrink_pass(nav: NavPass, student_cfg: M.ModelConfig,
                 teacher_cfg: M.ModelConfig) -> dict:
    depths_s = {LANGUAGE: student_cfg.n_lang_blocks,
                PANORAMA: student_cfg.n_pano_blocks,
                CROSS_COARSE: student_cfg.n_cross_blocks,
                CROSS_FINE: student_cfg.n_cross_blocks}
    depths_t = {LANGUAGE: teacher_cfg.n_lang_blocks,
                PANORAMA: teacher_cfg.n_pano_blocks,
                CROSS_COARSE: teacher_cfg.n_cross_blocks,
                CROSS_FINE: teacher_cfg.n_cross_blocks}
    blocks = {}
    for kind in KINDS:
        cap = nav.capture(kind)
        for m in range(1, depths_s[kind] + 1):
            h = layer_map(kind, m, depths_s[kind], depths_t[kind])
            blocks[(kind, h)] = (cap.scores[h - 1].data.astype(np.float32),
                                 cap.hiddens[h - 1].data.astype(np.float32))
    return {"E": nav.E.data.astype(np.float32), "blocks": blocks,
            "n_blocks": depths_t, "n_heads": nav.n_heads}


def _inflate_pass(entry: dict) -> NavPass:
    caps = {kind: M.EncoderCapture(
        scores=[None] * entry["n_blocks"][kind],
        probs=[None] * entry["n_blocks"][kind],
        hiddens=[None] * entry["n_blocks"][kind]) for kind in KINDS}
    for (kind, h), (scores, hidden) in entry["blocks"].items():
        caps[kind].scores[h - 1] = Tensor(scores.astype(float), requires_grad=False)
        caps[kind].hiddens[h - 1] = Tensor(hidden.astype(float), requires_grad=False)
    return NavPass(E=Tensor(entry["E"].astype(float), requires_grad=False),
                   f_L=None, h_t=None, lang=caps[LANGUAGE], pano=caps[PANORAMA],
                   coarse=caps[CROSS_COARSE], fine=caps[CROSS_FINE],
                   n_heads=entry["n_heads"])


# ---------------------------------------------------------------------------
# trainers


@dataclass
class LossReport:
    total: float
    task: float
    kd: float
    n_samples: int = 0


class PretrainTrainer:
    """Teacher-forced action prediction + trajectory matching (+ KD).

    ``kd_episodes`` is an optional pool of routes the student has no task
    labels for: samples drawn from it are forced along the teacher's own
    greedy rollout and contribute only the alignment losses. This is how a
    data-limited student consumes the rest of the teacher's corpus.
    """

    def __init__(self, student: M.DuetModel, teacher: M.DuetModel | None,
                 projections: Projections | None, plan: DistillPlan,
                 g: W.WorldGraph, episodes: list[W.Episode], lr: float,
                 seed: int, cache: dict | None = None,
                 kd_episodes: list[W.Episode] | None = None, t_max: int = 15):
        plan.validate()
        self.student, self.teacher = student, teacher
        self.proj, self.plan = projections, plan
        self.g, self.episodes = g, episodes
        self.rng = np.random.default_rng(seed)
        self.t_max = t_max
        kd_usable = (teacher is not None and projections is not None
                     and plan.any_pretrain_kd() and plan.kd_weight > 0)
        self.kd_episodes = list(kd_episodes) if kd_episodes and kd_usable else []
        params = dict(student.params)
        if teacher is not None and projections is not None and plan.any_pretrain_kd():
            for name, t in projections.tensors.items():
                params[f"proj.{name}"] = t
        self.opt = Adam(params, lr=lr)
        # teacher captures depend only on (world, episode, t); callers running
        # several students against one teacher may share the dict
        self._cache: dict = {} if cache is None else cache

    def _teacher_pass(self, ep: W.Episode, t: int,
                      path: list[int] | None = None) -> NavPass:
        key = (ep.seed, t, path is not None)
        if key not in self._cache:
            nav, _ = teacher_forced_pass(self.teacher, self.g, ep, t, path=path)
            self._cache[key] = _shrink_pass(nav, self.student.cfg, self.teacher.cfg)
        return _inflate_pass(self._cache[key])

    def _teacher_path(self, ep: W.Episode) -> list[int]:
        key = ("kd_path", ep.seed)
        if key not in self._cache:
            from . import metrics as X
            res = X.rollout(self.teacher, ep, self.g, mode="greedy",
                            t_max=self.t_max)
            self._cache[key] = list(res.taken_path)
        return self._cache[key]

    def sample(self):
        n_lab = len(self.episodes)
        i = int(self.rng.integers(n_lab + len(self.kd_episodes)))
        if i >= n_lab:
            ep = self.kd_episodes[i - n_lab]
            path = self._teacher_path(ep)
            t = int(self.rng.integers(0, len(path)))
            return ep, t, True, None, path
        ep = self.episodes[i]
        t = int(self.rng.integers(0, ep.n_hops + 1))
        matched = bool(self.rng.random() < 0.5) or n_lab < 2
        other = None
        if not matched:
            while other is None or other.seed == ep.seed:
                other = self.episodes[int(self.rng.integers(n_lab))]
        return ep, t, matched, other, None

    def step(self, batch_size: int) -> LossReport:
        self.opt.zero_grad()
        task_sum, kd_sum = None, None
        n_task = 0
        kd_active = (self.teacher is not None and self.proj is not None
                     and self.plan.any_pretrain_kd() and self.plan.kd_weight > 0)
        for _ in range(batch_size):
            ep, t, matched, other, kd_path = self.sample()
            if kd_path is not None:
                nav, _ = teacher_forced_pass(self.student, self.g, ep, t,
                                             path=kd_path)
                tea = self._teacher_pass(ep, t, path=kd_path)
                kd = pretrain_kd_loss(tea, nav, self.proj, self.plan)
                kd_sum = kd if kd_sum is None else ops.add(kd_sum, kd)
                continue
            instr = ep.instruction if matched else other.instruction
            nav, tmap = teacher_forced_pass(self.student, self.g, ep, t,
                                            instruction=instr)
            itm = ops.cross_entropy_index(self.student.itm_logits(nav.cls_coarse),
                                          1 if matched else 0)
            task = itm
            if matched:
                idx = sap_target_index(nav, self.g, ep.oracle_path[t], ep.goal_node)
                if idx is not None:
                    task = ops.add(task, ops.cross_entropy_index(nav.logits, idx))
                if kd_active:
                    tea = self._teacher_pass(ep, t)
                    kd = pretrain_kd_loss(tea, nav, self.proj, self.plan)
                    kd_sum = kd if kd_sum is None else ops.add(kd_sum, kd)
            task_sum = task if task_sum is None else ops.add(task_sum, task)
            n_task += 1
        total, task_val, kd_val = None, 0.0, 0.0
        if task_sum is not None:
            total = ops.scale(task_sum, 1.0 / n_task)
            task_val = total.item()
        if kd_sum is not None:
            # the raw term sum dwarfs the action loss by orders of magnitude
            # (score MSE against a converged teacher), so the weight matters
            kd_term = ops.scale(kd_sum, self.plan.kd_weight / batch_size)
            kd_val = kd_term.item()
            total = kd_term if total is None else ops.add(total, kd_term)
        ops.backward(total)
        self.opt.step()
        return LossReport(total=total.item(), task=task_val,
                          kd=kd_val, n_samples=batch_size)


class FinetuneTrainer:
    """Behavioral cloning on the student's own sampled rollouts (+ KD).

    ``kd_episodes`` works as in PretrainTrainer: the student rolls out on
    those routes too, but the per-step losses are teacher distillation only
    (no oracle action supervision).
    """

    def __init__(self, student: M.DuetModel, teacher: M.DuetModel | None,
                 projections: Projections | None, plan: DistillPlan,
                 g: W.WorldGraph, episodes: list[W.Episode], lr: float,
                 seed: int, t_max: int = 15,
                 kd_episodes: list[W.Episode] | None = None):
        plan.validate()
        self.student, self.teacher = student, teacher
        self.proj, self.plan = projections, plan
        self.g, self.episodes = g, episodes
        self.rng = np.random.default_rng(seed)
        self.t_max = t_max
        kd_usable = (teacher is not None and projections is not None
                     and plan.any_finetune_kd() and plan.kd_weight > 0)
        self.kd_episodes = list(kd_episodes) if kd_episodes and kd_usable else []
        params = dict(student.params)
        if teacher is not None and projections is not None and plan.any_finetune_kd():
            for name, t in projections.tensors.items():
                params[f"proj.{name}"] = t
        self.opt = Adam(params, lr=lr)

    def episode_loss(self, ep: W.Episode, labeled: bool = True):
        g, stu, tea = self.g, self.student, self.teacher
        kd_active = (tea is not None and self.proj is not None
                     and self.plan.any_finetune_kd() and self.plan.kd_weight > 0)
        E = stu.embed_instruction(ep.instruction)
        f_L, lang_cap = stu.encode_instruction(E)
        if kd_active:
            f_L_T, _ = tea.encode_instruction(tea.embed_instruction(ep.instruction))
        smap = M.TopoMap(world=g)
        tmap_T = M.TopoMap(world=g) if kd_active else None
        start = ep.start_node
        node = start
        step_losses, kd_losses = [], []
        for step in range(self.t_max):
            obs = W.render_observation(g, node, noise_seed=observation_seed(ep, step))
            rel = (g.positions[node] - g.positions[start]) / g.extent
            h_t, pano_cap = stu.encode_panorama(obs, rel)
            M.update_topo_map(smap, node, obs, h_t)
            co = stu.coarse_forward(f_L, smap)
            fi = stu.fine_forward(f_L, h_t)
            fl = stu.fuse_scores(co, fi, smap, obs.neighbor_view_index)
            nav = NavPass(E=E, f_L=f_L, h_t=h_t, lang=lang_cap, pano=pano_cap,
                          coarse=co.capture, fine=fi.capture, logits=fl.z,
                          candidate_ids=fl.candidate_ids, n_heads=stu.cfg.n_heads)
            if labeled:
                idx = sap_target_index(nav, g, node, ep.goal_node)
                if idx is not None:
                    step_losses.append(ops.cross_entropy_index(fl.z, idx))
            if kd_active:
                h_T, _ = tea.encode_panorama(obs, rel)
                M.update_topo_map(tmap_T, node, obs, h_T)
                co_T = tea.coarse_forward(f_L_T, tmap_T)
                fi_T = tea.fine_forward(f_L_T, h_T)
                fl_T = tea.fuse_scores(co_T, fi_T, tmap_T, obs.neighbor_view_index)
                tea_nav = NavPass(E=None, f_L=f_L_T, h_t=h_T, lang=None, pano=None,
                                  coarse=co_T.capture, fine=fi_T.capture,
                                  logits=fl_T.z, candidate_ids=fl_T.candidate_ids,
                                  n_heads=tea.cfg.n_heads)
                kd_losses.append(finetune_kd_loss(tea_nav, nav, self.proj, self.plan))
            action = stu.predict_action(fl, mode="sample", rng=self.rng)
            smap.freeze_features()   # history features become constants
            if kd_active:
                tmap_T.freeze_features()
            if action == M.STOP:
                break
            node = action
        n = max(len(step_losses), 1)
        task = None
        for sl in step_losses:
            task = sl if task is None else ops.add(task, sl)
        task = ops.scale(task, 1.0 / n) if task is not None else \
            Tensor(np.zeros(1), requires_grad=False)
        kd = None
        for kl in kd_losses:
            kd = kl if kd is None else ops.add(kd, kl)
        kd = ops.scale(kd, self.plan.kd_weight / max(len(kd_losses), 1)) \
            if kd is not None else Tensor(np.zeros(1), requires_grad=False)
        return task, kd

    def step(self, batch_size: int) -> LossReport:
        self.opt.zero_grad()
        task_sum, kd_sum = None, None
        n_lab, n_task = len(self.episodes), 0
        for _ in range(batch_size):
            i = int(self.rng.integers(n_lab + len(self.kd_episodes)))
            if i >= n_lab:
                _, kd = self.episode_loss(self.kd_episodes[i - n_lab],
                                          labeled=False)
            else:
                task, kd = self.episode_loss(self.episodes[i])
                task_sum = task if task_sum is None else ops.add(task_sum, task)
                n_task += 1
            kd_sum = kd if kd_sum is None else ops.add(kd_sum, kd)
        kd_term = ops.scale(kd_sum, 1.0 / batch_size)
        if task_sum is None:
            total = kd_term
            task_val = 0.0
        else:
            task_term = ops.scale(task_sum, 1.0 / n_task)
            task_val = task_term.item()
            total = ops.add(task_term, kd_term)
        ops.backward(total)
        self.opt.step()
        return LossReport(total=total.item(), task=task_val,
                          kd=kd_term.item(), n_samples=batch_size)
