"""Experiment orchestration: configs, the five-phase run, ablations, sweeps.

A run directory is self-describing: every phase appends its loss/eval rows to
a fragment under ``metrics/`` and saves its checkpoint before the next phase
starts, so interrupted runs resume from the last completed phase and produce
the same ``metrics.csv`` bytes as an uninterrupted one.  Phases communicate
only through artifacts on disk (world JSON, checkpoints), never through
in-memory state, which is what makes that equivalence hold.
"""

from dataclasses import dataclass, field, asdict, fields
import hashlib
import json
import math
import os

import numpy as np

from . import world as W
from . import model as M
from . import distill as D
from . import metrics as X
from . import checkpoint as C
from .model import ConfigError


class PhaseError(RuntimeError):
    """A phase was asked to run before its inputs exist."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class WorldParams:
    seed: int = 11
    n_nodes: int = 30
    target_degree: float = 3.0
    extent: float = 30.0
    min_hops: int = 3
    max_hops: int = 5
    v_land: int = 24
    v_obj: int = 16
    feature_seed: int = 0
    n_train_episodes: int = 160


@dataclass
class TrainParams:
    teacher_pretrain_iters: int = 600
    teacher_finetune_iters: int = 300
    pretrain_iters: int = 700
    finetune_iters: int = 400
    batch_size: int = 8
    finetune_batch_size: int = 4
    lr: float = 1e-3
    teacher_lr: float | None = None         # falls back to lr
    warmup_iters: int = 0      # linear ramp, helps the deep teacher
    teacher_warmup_iters: int | None = None  # falls back to warmup_iters
    cosine_decay: bool = False  # anneal to 5% of lr over each phase
    student_episodes: int | None = None  # cap student routes; teacher sees all
    t_max: int = 15

    def stage_lr(self, teacher: bool) -> float:
        return self.teacher_lr if teacher and self.teacher_lr is not None else self.lr

    def stage_warmup(self, teacher: bool) -> int:
        if teacher and self.teacher_warmup_iters is not None:
            return self.teacher_warmup_iters
        return self.warmup_iters


@dataclass
class DistillParams:
    kd_weight: float = 0.1
    pretrain_weight: float = 1.0  # scales the stage-1 term sum
    temperature: float = 1.0
    pretrain: bool = True      # stage-1 distillation (emb + attn + hidden)
    finetune: bool = True      # stage-2 distillation (txt + pano + fuse)
    txt: bool = True
    pano: bool = True
    fuse: bool = True
    single_stage: bool = False  # let finetune start from a fresh student


@dataclass
class EvalParams:
    n_episodes: int = 40       # per split
    n_unseen_worlds: int = 2
    n_seeds: int = 5           # replicates for ablation studies


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldParams = field(default_factory=WorldParams)
    teacher: M.ModelConfig = field(default_factory=lambda: M.TEACHER_CONFIG)
    student: M.ModelConfig = field(default_factory=lambda: M.STUDENT_CONFIG)
    train: TrainParams = field(default_factory=TrainParams)
    distill: DistillParams = field(default_factory=DistillParams)
    eval: EvalParams = field(default_factory=EvalParams)

    def validate(self) -> "ExperimentConfig":
        self.teacher.validate()
        self.student.validate()
        w, t, e = self.world, self.train, self.eval
        if not 1 <= w.min_hops <= w.max_hops:
            raise ConfigError(f"bad hop range [{w.min_hops}, {w.max_hops}]")
        if w.n_nodes < w.max_hops + 1:
            raise ConfigError(f"n_nodes {w.n_nodes} cannot host {w.max_hops}-hop paths")
        if w.n_train_episodes < 2:
            raise ConfigError("need >= 2 training episodes (trajectory matching "
                              "draws mismatched pairs)")
        for name in ("pretrain_iters", "finetune_iters", "batch_size",
                     "finetune_batch_size", "t_max"):
            if getattr(t, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        # 0 skips a teacher stage (e.g. a pretrain-only teacher)
        for name in ("teacher_pretrain_iters", "teacher_finetune_iters"):
            if getattr(t, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if t.warmup_iters < 0 or (t.teacher_warmup_iters or 0) < 0:
            raise ConfigError("warmup iteration counts must be >= 0")
        if t.lr <= 0 or (t.teacher_lr is not None and t.teacher_lr <= 0):
            raise ConfigError("learning rates must be positive")
        if t.student_episodes is not None and not (
                2 <= t.student_episodes <= w.n_train_episodes):
            raise ConfigError(f"train.student_episodes {t.student_episodes} must "
                              f"lie in [2, {w.n_train_episodes}]")
        if t.t_max < w.max_hops:
            raise ConfigError(f"t_max {t.t_max} < max_hops {w.max_hops}: the step "
                              "cap forecloses some oracle paths")
        if e.n_episodes < 1 or e.n_unseen_worlds < 1 or e.n_seeds < 1:
            raise ConfigError("eval counts must be >= 1")
        need_vocab = W.vocab_size(w.v_land, w.v_obj)
        need_len = 2 * w.max_hops + 4   # BOS + per-hop pair + FIND obj + EOS
        for label, cfg in (("teacher", self.teacher), ("student", self.student)):
            if cfg.vocab_size < need_vocab:
                raise ConfigError(f"{label}.vocab_size {cfg.vocab_size} < world "
                                  f"vocabulary {need_vocab}")
            if cfg.max_instruction_len < need_len:
                raise ConfigError(f"{label}.max_instruction_len {cfg.max_instruction_len}"
                                  f" < longest instruction {need_len}")
            if cfg.view_feature_dim != 32:
                raise ConfigError(f"{label}.view_feature_dim must match the renderer "
                                  f"width 32, got {cfg.view_feature_dim}")
            if cfg.n_objects < w.v_obj:
                raise ConfigError(f"{label}.n_objects {cfg.n_objects} < world "
                                  f"objects {w.v_obj}")
        d = self.distill
        try:
            D.DistillPlan(kd_weight=d.kd_weight, temperature=d.temperature).validate()
            D.DistillPlan(kd_weight=d.pretrain_weight).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if d.pretrain:
            if self.teacher.n_heads != self.student.n_heads:
                raise ConfigError("attention-score distillation needs equal head "
                                  f"counts, got {self.teacher.n_heads} vs "
                                  f"{self.student.n_heads}")
            for kind, ns, nt in (
                    (D.LANGUAGE, self.student.n_lang_blocks, self.teacher.n_lang_blocks),
                    (D.PANORAMA, self.student.n_pano_blocks, self.teacher.n_pano_blocks),
                    (D.CROSS_COARSE, self.student.n_cross_blocks, self.teacher.n_cross_blocks)):
                try:
                    D.LayerMap.build(kind, ns, nt)
                except D.IncompatibleDepths as exc:
                    raise ConfigError(str(exc)) from exc
        return self

    def to_json(self) -> str:
        return json.dumps({"schema": 1, **asdict(self)}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        schema = data.pop("schema", 1)
        if schema != 1:
            raise ConfigError(f"unknown config schema {schema!r}")
        sections = {"world": WorldParams, "teacher": M.ModelConfig,
                    "student": M.ModelConfig, "train": TrainParams,
                    "distill": DistillParams, "eval": EvalParams}
        kwargs = {}
        for key, value in data.items():
            if key in ("seed", "out_dir"):
                kwargs[key] = value
            elif key in sections:
                kwargs[key] = _build_section(sections[key], key, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)


def _build_section(dc_type, section, value):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(dc_type)}
    extra = set(value) - known
    if extra:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(extra)}")
    return dc_type(**value)


def load_config(path) -> "ExperimentConfig":
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_json(text)


def default_config(out_dir="runs/default", seed=0) -> ExperimentConfig:
    """End-to-end demo profile: two-hop routes, both teacher stages, full
    two-stage distillation, sized to finish on one core in well under half
    an hour."""
    return ExperimentConfig(
        seed=seed, out_dir=out_dir,
        world=WorldParams(seed=11, n_nodes=48, target_degree=2.5, extent=36.0,
                          min_hops=1, max_hops=2, n_train_episodes=144),
        train=TrainParams(teacher_pretrain_iters=2500, teacher_finetune_iters=300,
                          teacher_lr=5e-4, teacher_warmup_iters=200,
                          pretrain_iters=600, finetune_iters=300,
                          batch_size=8, finetune_batch_size=4,
                          lr=1e-3, warmup_iters=0, cosine_decay=True, t_max=6),
        distill=DistillParams(kd_weight=0.1, pretrain_weight=0.1,
                              temperature=2.0),
        eval=EvalParams(n_episodes=50, n_unseen_worlds=2, n_seeds=5))


def ablation_config(out_dir="runs/ablation", seed=0) -> ExperimentConfig:
    """Profile tuned for the stage ablation: one large diverse world, a
    converged pretrain-only teacher shared across arms, and students that
    see a quarter of the routes (the data-limited regime where the teacher
    has something to teach)."""
    return ExperimentConfig(
        seed=seed, out_dir=out_dir,
        world=WorldParams(seed=11, n_nodes=64, target_degree=2.5, extent=40.0,
                          min_hops=1, max_hops=1, n_train_episodes=128),
        train=TrainParams(teacher_pretrain_iters=4000, teacher_finetune_iters=0,
                          teacher_lr=5e-4, teacher_warmup_iters=200,
                          pretrain_iters=400, finetune_iters=250,
                          batch_size=8, finetune_batch_size=4,
                          lr=1e-3, warmup_iters=0, cosine_decay=True,
                          student_episodes=32, t_max=3),
        distill=DistillParams(kd_weight=0.1, pretrain_weight=0.01,
                              temperature=2.0),
        eval=EvalParams(n_episodes=96, n_unseen_worlds=4, n_seeds=5))


def derive_seed(base: int, label: str) -> int:
    """Stable, documented seed derivation; labels keep RNG streams disjoint."""
    digest = hashlib.sha256(f"{base}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# ---------------------------------------------------------------------------
# metrics rows
# ---------------------------------------------------------------------------

COLUMNS = ("phase", "iter", "seed", "loss_total", "loss_task", "loss_kd",
           "sr", "spl", "rgs", "rgspl", "median_ms", "params")


def _f(x) -> str:
    return repr(float(x))


def loss_row(phase: str, it: int, seed: int, rep: D.LossReport, params: int) -> dict:
    row = dict.fromkeys(COLUMNS, "")
    row.update(phase=phase, iter=str(it), seed=str(seed), loss_total=_f(rep.total),
               loss_task=_f(rep.task), loss_kd=_f(rep.kd), params=str(params))
    return row


def eval_row(phase: str, seed: int, m: dict, params: int) -> dict:
    # median_ms stays empty on purpose: wall-clock numbers would break the
    # byte-for-byte determinism of metrics.csv; latency lives in bench.json
    row = dict.fromkeys(COLUMNS, "")
    row.update(phase=phase, seed=str(seed), sr=_f(m["sr"]), spl=_f(m["spl"]),
               rgs=_f(m["rgs"]), rgspl=_f(m["rgspl"]), params=str(params))
    return row


def _write_rows(path, rows):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(",".join(COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row[c] for c in COLUMNS) + "\n")
    os.replace(tmp, path)


def _read_rows(path):
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or tuple(lines[0].split(",")) != COLUMNS:
        raise ValueError(f"{path} does not carry the metrics schema")
    return [dict(zip(COLUMNS, line.split(","))) for line in lines[1:]]


# ---------------------------------------------------------------------------
# run directory layout
# ---------------------------------------------------------------------------

PHASES = ("worlds", "teacher", "student_pretrain", "student_finetune", "eval")


def _fragment(out: str, phase: str) -> str:
    return os.path.join(out, "metrics", f"{PHASES.index(phase):02d}_{phase}.csv")


def _ckpt(out: str, name: str) -> str:
    return os.path.join(out, "checkpoints", f"{name}.ckpt")


def _ensure_dirs(out: str):
    for sub in ("worlds", "episodes", "checkpoints", "metrics"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)


def _done(out: str, phase: str, extra_paths=()) -> bool:
    paths = [_fragment(out, phase), *extra_paths]
    return all(os.path.exists(p) for p in paths)


def _save_json(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# phase bodies (pure functions of config + on-disk artifacts)
# ---------------------------------------------------------------------------

def _episode_batch(g, base, count, lo, hi):
    return [W.generate_episode(g, base + i, lo, hi) for i in range(count)]


def _phase_worlds(cfg: ExperimentConfig, out: str):
    w, e = cfg.world, cfg.eval
    g = W.generate_world(w.seed, w.n_nodes, w.target_degree, v_land=w.v_land,
                         v_obj=w.v_obj, extent=w.extent, feature_seed=w.feature_seed)
    _save_json(os.path.join(out, "worlds", "train.json"), W.world_to_json(g))
    train = _episode_batch(g, derive_seed(cfg.seed, "episodes.train"),
                           w.n_train_episodes, w.min_hops, w.max_hops)
    _save_json(os.path.join(out, "episodes", "train.json"),
               W.episodes_to_json(train, g.seed))
    seen = _episode_batch(g, derive_seed(cfg.seed, "episodes.val_seen"),
                          e.n_episodes, w.min_hops, w.max_hops)
    _save_json(os.path.join(out, "episodes", "val_seen.json"),
               W.episodes_to_json(seen, g.seed))
    counts = [e.n_episodes // e.n_unseen_worlds +
              (1 if i < e.n_episodes % e.n_unseen_worlds else 0)
              for i in range(e.n_unseen_worlds)]
    for i, count in enumerate(counts):
        gu = W.generate_world(derive_seed(cfg.seed, f"world.unseen{i}"), w.n_nodes,
                              w.target_degree, v_land=w.v_land, v_obj=w.v_obj,
                              extent=w.extent, feature_seed=w.feature_seed)
        _save_json(os.path.join(out, "worlds", f"unseen_{i}.json"),
                   W.world_to_json(gu))
        eps = _episode_batch(gu, derive_seed(cfg.seed, f"episodes.unseen{i}"),
                             count, w.min_hops, w.max_hops)
        _save_json(os.path.join(out, "episodes", f"unseen_{i}.json"),
                   W.episodes_to_json(eps, gu.seed))
    _write_rows(_fragment(out, "worlds"), [])


def load_world_artifacts(cfg: ExperimentConfig, out: str) -> dict:
    def _read(*parts):
        path = os.path.join(out, *parts)
        if not os.path.exists(path):
            raise PhaseError(f"missing artifact {path}; run gen-world first")
        with open(path) as fh:
            return fh.read()

    data = {"g": W.world_from_json(_read("worlds", "train.json")),
            "train": W.episodes_from_json(_read("episodes", "train.json")),
            "val_seen": W.episodes_from_json(_read("episodes", "val_seen.json")),
            "unseen": []}
    for i in range(cfg.eval.n_unseen_worlds):
        gu = W.world_from_json(_read("worlds", f"unseen_{i}.json"))
        eps = W.episodes_from_json(_read("episodes", f"unseen_{i}.json"))
        data["unseen"].append((gu, eps))
    return data


def _student_routes(cfg: ExperimentConfig, data: dict) -> list:
    k = cfg.train.student_episodes
    return data["train"] if k is None else data["train"][:k]


def _kd_routes(cfg: ExperimentConfig, data: dict, kd_on: bool) -> list | None:
    """Routes the student only ever sees through the teacher."""
    k = cfg.train.student_episodes
    if not kd_on or k is None:
        return None
    return data["train"][k:]


def _noop_plan(stage: str) -> D.DistillPlan:
    return D.DistillPlan(stage=stage, emb=False, attn=False, hidn=False,
                         txt=False, pano=False, fuse=False)


def _lr_at(t: TrainParams, i: int, total: int, teacher: bool = False) -> float:
    lr, warmup = t.stage_lr(teacher), t.stage_warmup(teacher)
    if warmup and i < warmup:
        return lr * (i + 1) / warmup
    if not t.cosine_decay:
        return lr
    frac = (i - warmup) / max(total - warmup, 1)
    return lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * frac)))


def _train_teacher(cfg: ExperimentConfig, data: dict, seed: int, rows: list):
    tea = M.DuetModel(cfg.teacher, seed=derive_seed(seed, "teacher.init"))
    n = tea.n_params()
    tr = D.PretrainTrainer(tea, None, None, _noop_plan("pretrain"), data["g"],
                           data["train"], lr=cfg.train.stage_lr(True),
                           seed=derive_seed(seed, "teacher.pretrain"))
    for i in range(cfg.train.teacher_pretrain_iters):
        tr.opt.state.lr = _lr_at(cfg.train, i, cfg.train.teacher_pretrain_iters,
                                 teacher=True)
        rows.append(loss_row("teacher_pretrain", i + 1, seed,
                             tr.step(cfg.train.batch_size), n))
    ft = D.FinetuneTrainer(tea, None, None, _noop_plan("finetune"), data["g"],
                           data["train"], lr=cfg.train.stage_lr(True),
                           seed=derive_seed(seed, "teacher.finetune"),
                           t_max=cfg.train.t_max)
    for i in range(cfg.train.teacher_finetune_iters):
        ft.opt.state.lr = _lr_at(cfg.train, i, cfg.train.teacher_finetune_iters,
                                 teacher=True)
        rows.append(loss_row("teacher_finetune", i + 1, seed,
                             ft.step(cfg.train.finetune_batch_size), n))
    return tea


def _pretrain_student(cfg: ExperimentConfig, data: dict, teacher, seed: int,
                      kd_on: bool, rows: list, cache: dict | None = None,
                      phase: str = "student_pretrain"):
    stu = M.DuetModel(cfg.student, seed=derive_seed(seed, "student.init"))
    n = stu.n_params()
    d = cfg.distill
    plan = D.DistillPlan(stage="pretrain", kd_weight=d.pretrain_weight,
                         temperature=d.temperature, emb=kd_on, attn=kd_on,
                         hidn=kd_on, txt=False, pano=False, fuse=False)
    proj = (D.Projections(cfg.student, cfg.teacher,
                          seed=derive_seed(seed, "proj.pretrain"))
            if kd_on else None)
    tr = D.PretrainTrainer(stu, teacher if kd_on else None, proj, plan,
                           data["g"], _student_routes(cfg, data), lr=cfg.train.lr,
                           seed=derive_seed(seed, "student.pretrain"),
                           cache=cache, kd_episodes=_kd_routes(cfg, data, kd_on),
                           t_max=cfg.train.t_max)
    for i in range(cfg.train.pretrain_iters):
        tr.opt.state.lr = _lr_at(cfg.train, i, cfg.train.pretrain_iters)
        rows.append(loss_row(phase, i + 1, seed, tr.step(cfg.train.batch_size), n))
    return stu


def _finetune_student(cfg: ExperimentConfig, data: dict, student, teacher,
                      seed: int, kd_on: bool, rows: list,
                      kd_weight: float | None = None,
                      txt: bool | None = None, pano: bool | None = None,
                      fuse: bool | None = None,
                      phase: str = "student_finetune"):
    d = cfg.distill
    plan = D.DistillPlan(stage="finetune",
                         kd_weight=d.kd_weight if kd_weight is None else kd_weight,
                         temperature=d.temperature, emb=False, attn=False,
                         hidn=False,
                         txt=(d.txt if txt is None else txt) and kd_on,
                         pano=(d.pano if pano is None else pano) and kd_on,
                         fuse=(d.fuse if fuse is None else fuse) and kd_on)
    kd_live = kd_on and plan.any_finetune_kd()
    proj = (D.Projections(cfg.student, cfg.teacher,
                          seed=derive_seed(seed, "proj.finetune"))
            if kd_live else None)
    ft = D.FinetuneTrainer(student, teacher if kd_live else None, proj, plan,
                           data["g"], _student_routes(cfg, data), lr=cfg.train.lr,
                           seed=derive_seed(seed, "student.finetune"),
                           t_max=cfg.train.t_max,
                           kd_episodes=_kd_routes(cfg, data, kd_live))
    n = student.n_params()
    for i in range(cfg.train.finetune_iters):
        ft.opt.state.lr = _lr_at(cfg.train, i, cfg.train.finetune_iters)
        rows.append(loss_row(phase, i + 1, seed,
                             ft.step(cfg.train.finetune_batch_size), n))
    return student


def _frozen_copy(model: M.DuetModel) -> M.DuetModel:
    twin = M.DuetModel(model.cfg, seed=0)
    twin.copy_params_from(model)
    twin.freeze()
    return twin


def _eval_splits(model: M.DuetModel, data: dict, t_max: int) -> dict:
    frozen = _frozen_copy(model)
    out = {}
    seen = [X.rollout(frozen, ep, data["g"], mode="greedy", t_max=t_max)
            for ep in data["val_seen"]]
    out["val_seen"] = _summarize(seen)
    unseen = []
    for gu, eps in data["unseen"]:
        unseen.extend(X.rollout(frozen, ep, gu, mode="greedy", t_max=t_max)
                      for ep in eps)
    out["val_unseen"] = _summarize(unseen)
    return out


def _summarize(results) -> dict:
    rgs, rgspl = X.rgs_rgspl(results)
    return {"sr": X.success_rate(results), "spl": X.spl(results),
            "rgs": rgs, "rgspl": rgspl, "n": len(results)}


def _load_teacher(cfg: ExperimentConfig, out: str) -> M.DuetModel:
    path = _ckpt(out, "teacher")
    if not os.path.exists(path):
        raise PhaseError(f"missing {path}; run train-teacher first")
    tea, _ = C.load_model(path, cfg.teacher)
    tea.freeze()
    return tea


# ---------------------------------------------------------------------------
# the five-phase pipeline
# ---------------------------------------------------------------------------

def run_phase(cfg: ExperimentConfig, out: str, phase: str, resume: bool) -> bool:
    """Run one phase unless ``resume`` finds it already complete."""
    markers = {"worlds": (),
               "teacher": (_ckpt(out, "teacher"),),
               "student_pretrain": (_ckpt(out, "student_pretrain"),),
               "student_finetune": (_ckpt(out, "student"),),
               "eval": ()}
    if resume and _done(out, phase, markers[phase]):
        return False
    _ensure_dirs(out)
    rows: list = []
    if phase == "worlds":
        _phase_worlds(cfg, out)
        return True
    data = load_world_artifacts(cfg, out)
    if phase == "teacher":
        tea = _train_teacher(cfg, data, cfg.seed, rows)
        C.save_model(tea, _ckpt(out, "teacher"))
    elif phase == "student_pretrain":
        tea = _load_teacher(cfg, out) if cfg.distill.pretrain else None
        stu = _pretrain_student(cfg, data, tea, cfg.seed, cfg.distill.pretrain, rows)
        C.save_model(stu, _ckpt(out, "student_pretrain"))
    elif phase == "student_finetune":
        pre = _ckpt(out, "student_pretrain")
        if os.path.exists(pre):
            stu, _ = C.load_model(pre, cfg.student)
        elif cfg.distill.single_stage:
            stu = M.DuetModel(cfg.student, seed=derive_seed(cfg.seed, "student.init"))
        else:
            raise PhaseError(f"missing {pre}; run distill-pretrain first or set "
                             "distill.single_stage")
        tea = _load_teacher(cfg, out) if cfg.distill.finetune else None
        _finetune_student(cfg, data, stu, tea, cfg.seed, cfg.distill.finetune, rows)
        C.save_model(stu, _ckpt(out, "student"))
    elif phase == "eval":
        tea = _load_teacher(cfg, out)
        path = _ckpt(out, "student")
        if not os.path.exists(path):
            raise PhaseError(f"missing {path}; run distill-finetune first")
        stu, _ = C.load_model(path, cfg.student)
        for name, model in (("teacher", tea), ("student", stu)):
            split_metrics = _eval_splits(model, data, cfg.train.t_max)
            for split, m in split_metrics.items():
                rows.append(eval_row(f"eval_{name}_{split}", cfg.seed, m,
                                     model.n_params()))
    else:
        raise ValueError(f"unknown phase {phase!r}")
    _write_rows(_fragment(out, phase), rows)
    return True


def run_pipeline(cfg: ExperimentConfig, resume: bool = False,
                 bench_episodes: int = 10) -> dict:
    cfg.validate()
    out = cfg.out_dir
    _ensure_dirs(out)
    _save_json(os.path.join(out, "config.json"), cfg.to_json())
    ran, skipped = [], []
    for phase in PHASES:
        (ran if run_phase(cfg, out, phase, resume) else skipped).append(phase)
    metrics_path, summary_path = export_metrics(out)
    report = None
    if bench_episodes > 0:
        data = load_world_artifacts(cfg, out)
        tea = _load_teacher(cfg, out)
        stu, _ = C.load_model(_ckpt(out, "student"), cfg.student)
        stu.freeze()
        report = X.compare_latency(tea, stu, data["val_seen"][:bench_episodes],
                                   data["g"], t_max=cfg.train.t_max)
        _save_json(os.path.join(out, "bench.json"),
                   json.dumps(report, indent=2, sort_keys=True))
    with open(summary_path) as fh:
        summary = json.load(fh)
    return {"out_dir": out, "phases_run": ran, "phases_skipped": skipped,
            "summary": summary, "latency": report,
            "metrics_csv": metrics_path, "summary_json": summary_path}


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_metrics(out: str) -> tuple[str, str]:
    """Rebuild metrics.csv and summary.json from the phase fragments."""
    frag_dir = os.path.join(out, "metrics")
    if not os.path.isdir(frag_dir):
        raise PhaseError(f"no metrics fragments under {out}")
    rows = []
    for name in sorted(os.listdir(frag_dir)):
        if name.endswith(".csv"):
            rows.extend(_read_rows(os.path.join(frag_dir, name)))
    metrics_path = os.path.join(out, "metrics.csv")
    _write_rows(metrics_path, rows)

    summary: dict = {"schema": 1, "metrics_csv": "metrics.csv",
                     "splits": {}, "params": {}}
    for row in rows:
        if not row["phase"].startswith("eval_"):
            continue
        _, model, split = row["phase"].split("_", 2)
        entry = {k: float(row[k]) for k in ("sr", "spl", "rgs", "rgspl")}
        summary["splits"].setdefault(split, {})[model] = entry
        summary["params"][model] = int(row["params"])
    if {"teacher", "student"} <= set(summary["params"]):
        summary["params"]["ratio"] = (summary["params"]["student"]
                                      / summary["params"]["teacher"])
    if os.path.exists(os.path.join(out, "bench.json")):
        summary["latency_report"] = "bench.json"
    summary_path = os.path.join(out, "summary.json")
    _save_json(summary_path, json.dumps(summary, indent=2, sort_keys=True))
    return metrics_path, summary_path


# ---------------------------------------------------------------------------
# ablation: which distillation stages matter
# ---------------------------------------------------------------------------

ARMS = {"both": (True, True), "pretrain_only": (True, False),
        "finetune_only": (False, True), "none": (False, False)}


def ensure_shared_stage(cfg: ExperimentConfig, shared: str) -> str:
    """World + teacher artifacts reused by every arm; returns the shared dir."""
    for phase in ("worlds", "teacher"):
        run_phase(cfg, shared, phase, resume=True)
    return shared


def run_ablation(cfg: ExperimentConfig, arms=None, seeds=None) -> dict:
    cfg.validate()
    if arms is None:
        arms = list(ARMS)
    elif isinstance(arms, str):
        arms = [arms]
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise ConfigError(f"unknown ablation arms {unknown}; choose from {list(ARMS)}")
    if seeds is None:
        seeds = [derive_seed(cfg.seed, f"ablation.rep{i}")
                 for i in range(cfg.eval.n_seeds)]
    out = cfg.out_dir
    shared = ensure_shared_stage(cfg, os.path.join(out, "shared"))
    data = load_world_artifacts(cfg, shared)
    teacher = _load_teacher(cfg, shared)
    teacher_digest = file_digest(_ckpt(shared, "teacher"))
    cache: dict = {}

    runs = []
    for rep, seed in enumerate(seeds):
        for arm in arms:
            kd1, kd2 = ARMS[arm]
            arm_dir = os.path.join(out, f"rep{rep}", arm)
            _ensure_dirs(arm_dir)
            rows: list = []
            stu = _pretrain_student(cfg, data, teacher, seed, kd1, rows,
                                    cache=cache)
            _write_rows(_fragment(arm_dir, "student_pretrain"), rows)
            rows = []
            _finetune_student(cfg, data, stu, teacher, seed, kd2, rows)
            _write_rows(_fragment(arm_dir, "student_finetune"), rows)
            C.save_model(stu, _ckpt(arm_dir, "student"))
            split_metrics = _eval_splits(stu, data, cfg.train.t_max)
            _write_rows(_fragment(arm_dir, "eval"),
                        [eval_row(f"eval_student_{s}", seed, m, stu.n_params())
                         for s, m in split_metrics.items()])
            m = split_metrics["val_unseen"]
            runs.append({"arm": arm, "rep": rep, "seed": seed,
                         "sr": m["sr"], "spl": m["spl"], "rgs": m["rgs"],
                         "rgspl": m["rgspl"], "teacher_digest": teacher_digest})

    table = []
    for arm in arms:
        sub = [r for r in runs if r["arm"] == arm]
        entry = {"arm": arm, "n": len(sub), "teacher_digest": teacher_digest}
        for key in ("sr", "spl", "rgs", "rgspl"):
            vals = np.array([r[key] for r in sub])
            entry[f"mean_{key}"] = float(vals.mean())
            entry[f"std_{key}"] = float(vals.std())
        table.append(entry)

    _write_table(os.path.join(out, "ablation_runs.csv"), runs,
                 ("arm", "rep", "seed", "sr", "spl", "rgs", "rgspl",
                  "teacher_digest"))
    _write_table(os.path.join(out, "ablation.csv"), table,
                 ("arm", "n", "mean_sr", "std_sr", "mean_spl", "std_spl",
                  "mean_rgs", "std_rgs", "mean_rgspl", "std_rgspl",
                  "teacher_digest"))
    return {"table": table, "runs": runs, "teacher_digest": teacher_digest,
            "out_dir": out}


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_table(path, rows, columns):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(row[c]) for c in columns) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# sweeps: fine-tuning KD weight and objective subsets
# ---------------------------------------------------------------------------

KD_WEIGHTS = (0.01, 0.1, 1.0)
OBJECTIVE_ARMS = (("all", True, True, True),
                  ("no_txt", False, True, True),
                  ("no_pano", True, False, True),
                  ("no_fuse", True, True, False),
                  ("fuse_only", False, False, True))


def ensure_sweep_stage(cfg: ExperimentConfig, shared: str) -> str:
    """Shared world + teacher + pretrain-distilled student for every arm."""
    for phase in ("worlds", "teacher", "student_pretrain"):
        run_phase(cfg, shared, phase, resume=True)
    return shared


def run_sweep_arm(cfg: ExperimentConfig, shared: str, arm_dir: str, name: str,
                  kd_weight: float, txt: bool, pano: bool, fuse: bool) -> dict:
    """One fine-tuning run from the shared pretrain checkpoint.

    Reruns with the same name are byte-identical: every input is loaded from
    the shared artifacts and all seeds derive from (config seed, arm name).
    """
    data = load_world_artifacts(cfg, shared)
    teacher = _load_teacher(cfg, shared)
    stu, _ = C.load_model(_ckpt(shared, "student_pretrain"), cfg.student)
    seed = derive_seed(cfg.seed, f"sweep.{name}")
    _ensure_dirs(arm_dir)
    rows: list = []
    _finetune_student(cfg, data, stu, teacher, seed, True, rows,
                      kd_weight=kd_weight, txt=txt, pano=pano, fuse=fuse)
    _write_rows(_fragment(arm_dir, "student_finetune"), rows)
    C.save_model(stu, _ckpt(arm_dir, "student"))
    split_metrics = _eval_splits(stu, data, cfg.train.t_max)
    _write_rows(_fragment(arm_dir, "eval"),
                [eval_row(f"eval_student_{s}", seed, m, stu.n_params())
                 for s, m in split_metrics.items()])
    export_metrics(arm_dir)
    m = split_metrics["val_unseen"]
    return {"arm": name, "kd_weight": kd_weight, "txt": txt, "pano": pano,
            "fuse": fuse, "sr": m["sr"], "spl": m["spl"], "rgs": m["rgs"],
            "rgspl": m["rgspl"]}


def run_sweep(cfg: ExperimentConfig, kd_weights=KD_WEIGHTS) -> dict:
    cfg.validate()
    out = cfg.out_dir
    shared = ensure_sweep_stage(cfg, os.path.join(out, "shared"))
    pre_digest = file_digest(_ckpt(shared, "student_pretrain"))
    arms = [("kdweight", f"kdw_{w:g}", float(w), True, True, True)
            for w in kd_weights]
    arms += [("objective", f"obj_{name}", cfg.distill.kd_weight, txt, pano, fuse)
             for name, txt, pano, fuse in OBJECTIVE_ARMS]
    rows = []
    for sweep, name, w, txt, pano, fuse in arms:
        res = run_sweep_arm(cfg, shared, os.path.join(out, name), name,
                            w, txt, pano, fuse)
        res.update(sweep=sweep, pretrain_digest=pre_digest)
        rows.append(res)
    _write_table(os.path.join(out, "sweep.csv"), rows,
                 ("sweep", "arm", "kd_weight", "txt", "pano", "fuse",
                  "sr", "spl", "rgs", "rgspl", "pretrain_digest"))
    return {"rows": rows, "pretrain_digest": pre_digest, "out_dir": out}
