"""End-to-end scenario orchestration: target training, stage-0, the adaptation
loop, metric computation (Acc / average incremental accuracy), persistence,
and reporting.

Every stochastic component draws its seed from the scenario seed through a
named substream, so two runs of the same config produce byte-identical results
files. Timing and environment details go to a separate run_meta.json so the
results file stays comparable.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .adaptation import (
    AdaptationReport,
    AdaptationSettings,
    PrototypeCache,
    adapt_stage,
    compute_prototypes,
)
from .attacks import AdversarialBatch, attack_from_dict, generate, with_seed
from .config import (
    ScenarioConfig,
    config_hash,
    config_to_dict,
    save_config,
    stage_attack_specs,
)
from .data import (
    DefenseBudget,
    LabeledDataset,
    apply_attack_to_budget,
    load_dataset,
    merge_budgets,
    sample_budget,
)
from .ensemble import calibrate_logit_scales, make_predict_fn
from .errors import ConfigError, EvaluationError
from .models import (
    ConvBackbone,
    ModelConfig,
    TargetModel,
    build_models,
    load_checkpoint,
    module_digest,
    save_checkpoint,
)
from .stage_zero import train_stage0, train_weight_estimator
from .utils import images_to_tensor, labels_to_tensor, seed_for, stable_hash


def evaluate_acc(predict_fn, dataset) -> float:
    """Fraction of correct predictions; dataset may be a LabeledDataset or an
    (images, labels) pair."""
    if isinstance(dataset, LabeledDataset):
        images, labels = dataset.images, dataset.labels
    else:
        images, labels = dataset
    if len(images) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    preds = np.asarray(predict_fn(images))
    return float((preds == np.asarray(labels)).mean())


def compute_aiacc(per_attack_accs) -> float:
    """Average incremental accuracy: mean Acc over all attacks seen so far."""
    accs = list(per_attack_accs)
    if not accs:
        raise EvaluationError("AIAcc needs at least one per-attack accuracy")
    return float(np.mean(accs))


@dataclass
class StageRecord:
    """Evaluation snapshot after one stage."""

    stage: int
    attack_names: list[str]
    adv_acc: list[float]
    clean_acc: float
    aiacc: float
    unseen_acc: dict[str, float]
    cache_entries: int
    cache_bytes: int
    budget_before: int
    budget_after: int
    expanded: bool
    defense_initial_attack_acc: float
    extractor_digest: str
    classifier_block_digests: list[str]

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "attack_names": list(self.attack_names),
            "adv_acc": [round(a, 6) for a in self.adv_acc],
            "clean_acc": round(self.clean_acc, 6),
            "aiacc": round(self.aiacc, 6),
            "unseen_acc": {k: round(v, 6) for k, v in sorted(self.unseen_acc.items())},
            "cache_entries": self.cache_entries,
            "cache_bytes": self.cache_bytes,
            "budget_before": self.budget_before,
            "budget_after": self.budget_after,
            "expanded": self.expanded,
            "defense_initial_attack_acc": round(self.defense_initial_attack_acc, 6),
            "extractor_digest": self.extractor_digest,
            "classifier_block_digests": list(self.classifier_block_digests),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "StageRecord":
        return cls(**payload)


def train_target(
    model: TargetModel,
    dataset: LabeledDataset,
    epochs: int,
    optim_cfg,
    rng: np.random.Generator,
    augment: bool = False,
) -> list[dict]:
    """Plain cross-entropy training of the protected classifier."""
    from .stage_zero import _augment_batch, _cosine_lr

    x_all = images_to_tensor(dataset.images)
    y_all = labels_to_tensor(dataset.labels)
    opt = torch.optim.SGD(
        model.parameters(), lr=optim_cfg.lr, momentum=optim_cfg.momentum,
        weight_decay=optim_cfg.weight_decay,
    )
    log = []
    model.train()
    for epoch in range(epochs):
        if optim_cfg.cosine_decay:
            for group in opt.param_groups:
                group["lr"] = _cosine_lr(optim_cfg.lr, epoch, epochs)
        order = rng.permutation(len(x_all))
        total, correct, batches = 0.0, 0, 0
        for start in range(0, len(order), optim_cfg.batch_size):
            idx = torch.from_numpy(order[start : start + optim_cfg.batch_size])
            batch, targets = x_all[idx], y_all[idx]
            if augment:
                batch = _augment_batch(batch, rng)
            opt.zero_grad()
            logits = model(batch)
            loss = F.cross_entropy(logits, targets)
            loss.backward()
            opt.step()
            total += loss.item()
            correct += int((logits.argmax(dim=-1) == targets).sum())
            batches += 1
        log.append(
            {"epoch": epoch, "loss": total / max(batches, 1), "train_acc": correct / len(order),
             "lr": opt.param_groups[0]["lr"]}
        )
    model.eval()
    return log


def _write_jsonl(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


class ScenarioRun:
    """Stateful driver for one scenario: builds models, runs stages, records.

    The same driver backs both the one-shot `run` entry point and the
    step-by-step CLI subcommands; artifacts live under `config.out_dir`.
    """

    def __init__(self, config: ScenarioConfig, quiet: bool = True):
        self.config = config
        self.quiet = quiet
        self.hash = config_hash(config)
        self.out = Path(config.out_dir)
        self.ckpt_dir = self.out / "checkpoints"
        self.records: list[StageRecord] = []
        self.reports: list[AdaptationReport] = []
        self.timings: dict = {}
        self._adv_test_cache: dict[str, AdversarialBatch] = {}

        self.train_set = load_dataset(config.data.source, "train", config.data.root)
        self.test_set = load_dataset(config.data.source, "test", config.data.root)
        if self.train_set.num_classes != config.num_classes:
            raise ConfigError(
                f"dataset has {self.train_set.num_classes} classes, config says {config.num_classes}"
            )
        mean, std = self.train_set.channel_stats()
        blocks = sum(len(stage_attack_specs(config, i)) for i in range(1, config.stages + 1)) \
            if config.expand.per_attack else config.stages
        self.model_config = ModelConfig(
            num_classes=config.num_classes,
            stages=blocks,
            in_channels=self.train_set.image_shape[-1],
            backbone_channels=config.model.channels,
            embedding_dim=config.model.embedding_dim,
            split_index=config.model.split_index,
            norm=config.model.norm,
            gn_groups=config.model.gn_groups,
            bias=config.model.bias,
            classifier_scale=config.model.classifier_scale,
            estimator_channels=config.model.estimator_channels,
            input_mean=tuple(float(v) for v in mean),
            input_std=tuple(float(v) for v in std),
        )
        self.target, self.defense, self.estimator = build_models(
            self.model_config, seed_for(config.seed, "models")
        )
        self.scales: tuple[float, float] = (1.0, 1.0)
        self.cache = PrototypeCache(
            config.model.embedding_dim, config.num_classes * (blocks + 1)
        )
        self._stage0_spec = self._resolve_spec(stage_attack_specs(config, 0)[0], "stage0-train")

    # ---------------------------------------------------------------- helpers

    def _say(self, message: str) -> None:
        if not self.quiet:
            print(message, flush=True)

    def _resolve_spec(self, spec_dict: dict, tag: str):
        spec = attack_from_dict(spec_dict)
        return with_seed(spec, seed_for(self.config.seed, f"{tag}:{spec.name}"))

    def _spec_key(self, spec) -> str:
        payload = spec.to_dict()
        payload.pop("seed")
        return f"{spec.name}:{stable_hash(payload)[:12]}"

    def adv_test_set(self, spec_dict: dict) -> AdversarialBatch:
        """Attacked copy of the test split for one spec (generated once)."""
        spec = self._resolve_spec(spec_dict, "test-eval")
        key = self._spec_key(spec)
        if key not in self._adv_test_cache:
            self._say(f"  attacking test split with {spec.name}")
            self._adv_test_cache[key] = generate(
                spec, self.target, self.test_set.images, self.test_set.labels
            )
        return self._adv_test_cache[key]

    def _ensemble_predict_fn(self, force_weights=None):
        estimator = None if self.config.ablation.disable_fp else self.estimator
        return make_predict_fn(
            self.target,
            self.defense,
            estimator,
            self.config.num_classes,
            scales=self.scales,
            space=self.config.ensemble.space,
            force_weights=force_weights,
            batch_size=self.config.eval.batch_size,
        )

    def _filter_predict_fn(self):
        if self.config.filter.use_ensemble and not self.config.ablation.disable_fp:
            return self._ensemble_predict_fn()
        return self._ensemble_predict_fn(force_weights=(0.0, 1.0))

    def _target_factory(self):
        cfg = self.model_config
        return lambda: TargetModel(ConvBackbone(cfg), cfg.num_classes)

    # ----------------------------------------------------------------- phases

    def ensure_target(self, resume: bool = False) -> None:
        path = self.ckpt_dir / "target.pt"
        if resume and path.exists():
            load_checkpoint(path, self.target, "target")
            self.target.freeze()
            self._say("loaded target checkpoint")
            return
        started = time.perf_counter()
        rng = np.random.default_rng(seed_for(self.config.seed, "target-train"))
        log = train_target(
            self.target,
            self.train_set,
            self.config.training.target_epochs,
            self.config.training.target,
            rng,
            augment=self.config.training.target_augment,
        )
        self.target.freeze()
        self.timings["target_train"] = time.perf_counter() - started
        _write_jsonl(self.out / "logs" / "target_training.jsonl", log)
        save_checkpoint(path, self.target, "target", 0, self.hash)
        self._say(f"trained target model ({self.config.training.target_epochs} epochs)")

    def ensure_stage0(self, resume: bool = False) -> None:
        defense_path = self.ckpt_dir / "stage0_defense.pt"
        estimator_path = self.ckpt_dir / "estimator.pt"
        cache_path = self.out / "cache" / "prototypes.npz"
        scales_path = self.out / "scales.json"
        if resume and defense_path.exists():
            load_checkpoint(defense_path, self.defense, "defense")
            self.defense.freeze_extractor()
            if estimator_path.exists():
                load_checkpoint(estimator_path, self.estimator, "estimator")
            self.cache = PrototypeCache.load(cache_path, self.config.model.embedding_dim)
            self.scales = tuple(json.loads(scales_path.read_text())["scales"])
            self._say("loaded stage-0 checkpoints")
            return
        config = self.config
        started = time.perf_counter()
        adv_train = generate(
            self._stage0_spec, self.target, self.train_set.images, self.train_set.labels
        )
        rng = np.random.default_rng(seed_for(config.seed, "stage0-train"))
        use_reservation = not config.ablation.disable_l0 and self.model_config.num_virtual > 0
        log = train_stage0(
            self.defense,
            adv_train.images,
            adv_train.labels,
            config.training.stage0_epochs,
            config.training.stage0,
            gamma=config.loss.gamma,
            alpha=config.loss.mixup_alpha,
            beta=config.loss.mixup_beta,
            rng=rng,
            use_reservation=use_reservation,
            augment=config.training.stage0_augment,
        )
        self.timings["stage0_train"] = time.perf_counter() - started
        _write_jsonl(self.out / "logs" / "stage0_training.jsonl", log)

        if not config.ablation.disable_fp:
            started = time.perf_counter()
            est_rng = np.random.default_rng(seed_for(config.seed, "estimator-train"))
            est_log = train_weight_estimator(
                self.estimator,
                self.train_set.images,
                config.self_perturb_eps,
                config.training.estimator_epochs,
                config.training.estimator,
                rng=est_rng,
                model_factory=self._target_factory(),
            )
            self.timings["estimator_train"] = time.perf_counter() - started
            _write_jsonl(self.out / "logs" / "estimator_training.jsonl", est_log)
            if config.ensemble.calibrate:
                calib_rng = np.random.default_rng(seed_for(config.seed, "calibration"))
                picks = calib_rng.choice(
                    len(self.train_set), size=min(256, len(self.train_set)), replace=False
                )
                self.scales = calibrate_logit_scales(
                    self.target,
                    self.defense,
                    self.train_set.images[picks],
                    config.num_classes,
                )

        # Stage-0 prototypes come from a K-per-class subsample of the initial
        # adversarial training set, mirroring the later stages' budget size.
        proto_budget_idx = sample_budget(
            self.train_set,
            config.num_classes,
            min(config.budget_per_class, min(len(self.train_set.class_indices(c)) for c in range(config.num_classes))),
            0,
            seed_for(config.seed, "budget"),
        )
        flat = proto_budget_idx.flat_indices
        proto_budget = DefenseBudget(
            stage=0,
            images=adv_train.images[flat],
            labels=adv_train.labels[flat],
            source_indices=flat,
            attack_names=(self._stage0_spec.name,),
        )
        self.cache.append(
            compute_prototypes(self.defense.extractor, proto_budget, 0, config.num_classes)
        )

        save_checkpoint(defense_path, self.defense, "defense", 0, self.hash)
        if not config.ablation.disable_fp:
            save_checkpoint(estimator_path, self.estimator, "estimator", 0, self.hash)
        self.cache.save(cache_path)
        scales_path.parent.mkdir(parents=True, exist_ok=True)
        scales_path.write_text(json.dumps({"scales": list(self.scales)}))
        self._say(f"stage-0 complete ({config.training.stage0_epochs} epochs)")

    def run_stage(self, stage: int, resume: bool = False) -> None:
        """Sample the stage budget, attack it, adapt, and record evaluation."""
        config = self.config
        stage_path = self.ckpt_dir / f"stage{stage}_defense.pt"
        if resume and stage_path.exists():
            meta = load_checkpoint(stage_path, self.defense, "defense")
            self.defense.freeze_extractor()
            self.cache = PrototypeCache.load(
                self.out / "cache" / "prototypes.npz", config.model.embedding_dim
            )
            record_payloads = json.loads((self.out / f"record_stage{stage}.json").read_text())
            self.records.append(StageRecord.from_dict(record_payloads))
            self._say(f"loaded stage {stage} checkpoint ({meta['stage']} blocks)")
            return
        started = time.perf_counter()
        budget_idx = sample_budget(
            self.train_set,
            config.num_classes,
            config.budget_per_class,
            stage,
            seed_for(config.seed, "budget"),
        )
        (self.out / "budgets").mkdir(parents=True, exist_ok=True)
        budget_idx.save(self.out / "budgets" / f"stage{stage}.json")
        spec_dicts = stage_attack_specs(config, stage)
        budgets = []
        for j, spec_dict in enumerate(spec_dicts):
            spec = self._resolve_spec(spec_dict, f"stage{stage}-budget-{j}")
            budgets.append(apply_attack_to_budget(budget_idx, spec, self.train_set, self.target))

        settings = AdaptationSettings(
            epochs=config.training.finetune_epochs,
            lr=config.training.finetune.lr,
            momentum=config.training.finetune.momentum,
            batch_size=config.training.finetune.batch_size,
            lam=config.loss.lam,
            proto_noise_sigma=config.loss.proto_noise_sigma,
            min_survivors=config.filter.min_survivors,
            init_from_virtual=config.expand.init_from_virtual,
            finetune_old_columns=config.finetune.old_columns,
            use_prototype_loss=not config.ablation.disable_lproto,
        )
        rng = np.random.default_rng(seed_for(config.seed, f"adapt-stage{stage}"))
        blocks = budgets if config.expand.per_attack else [merge_budgets(budgets)]
        for block in blocks:
            report = adapt_stage(
                self.defense,
                self.cache,
                block,
                self.defense.stage + 1,
                settings,
                predict_fn=self._filter_predict_fn(),
                rng=rng,
            )
            self.reports.append(report)
        self.timings[f"stage{stage}_adapt"] = time.perf_counter() - started

        record = self.evaluate_stage(stage)
        save_checkpoint(stage_path, self.defense, "defense", self.defense.stage, self.hash)
        self.cache.save(self.out / "cache" / "prototypes.npz")
        (self.out / f"record_stage{stage}.json").write_text(
            json.dumps(record.to_dict(), sort_keys=True, indent=2)
        )
        self._say(
            f"stage {stage}: budget {record.budget_before}->{record.budget_after}, "
            f"AIAcc {record.aiacc:.3f}, clean {record.clean_acc:.3f}"
        )

    def evaluate_stage(self, stage: int) -> StageRecord:
        """Evaluate clean + all seen attacks (+ unseen pool) and append a record."""
        config = self.config
        started = time.perf_counter()
        ens_fn = self._ensemble_predict_fn()
        adv_fn = ens_fn if config.eval.use_ensemble else self._ensemble_predict_fn(force_weights=(0.0, 1.0))
        clean_acc = evaluate_acc(ens_fn, self.test_set)
        adv_accs, names = [], []
        for k in range(stage + 1):
            for spec_dict in stage_attack_specs(config, k):
                adv = self.adv_test_set(spec_dict)
                adv_accs.append(evaluate_acc(adv_fn, (adv.images, adv.labels)))
                if k == stage:
                    names.append(adv.spec.name)
        unseen = {}
        for spec_dict in config.eval.unseen_attacks:
            adv = self.adv_test_set(spec_dict)
            unseen[adv.spec.name] = evaluate_acc(ens_fn, (adv.images, adv.labels))
        initial = self.adv_test_set(stage_attack_specs(config, 0)[0])
        defense_fn = self._ensemble_predict_fn(force_weights=(0.0, 1.0))
        defense_initial = evaluate_acc(defense_fn, (initial.images, initial.labels))

        n_blocks = len(stage_attack_specs(config, stage)) if stage else 0
        current = self.reports[-n_blocks:] if n_blocks else []
        budget_before = sum(r.budget_before for r in current)
        budget_after = sum(r.budget_after for r in current)
        expanded = any(r.expanded for r in current)

        record = StageRecord(
            stage=stage,
            attack_names=names,
            adv_acc=adv_accs,
            clean_acc=clean_acc,
            aiacc=compute_aiacc(adv_accs),
            unseen_acc=unseen,
            cache_entries=len(self.cache),
            cache_bytes=self.cache.nbytes,
            budget_before=budget_before,
            budget_after=budget_after,
            expanded=expanded,
            defense_initial_attack_acc=defense_initial,
            extractor_digest=module_digest(self.defense.extractor),
            classifier_block_digests=self.defense.classifier.block_digests(),
        )
        self.records.append(record)
        self.timings[f"stage{stage}_eval"] = time.perf_counter() - started
        return record

    def finish(self) -> Path:
        emit_report(self.records, self.out, config=self.config, formats=("json", "table"))
        meta = {
            "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "torch_version": torch.__version__,
            "timings_sec": {k: round(v, 3) for k, v in self.timings.items()},
        }
        (self.out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return self.out / "results.json"


def run_scenario(config: ScenarioConfig, resume: bool = False, quiet: bool = True) -> list[StageRecord]:
    """Run the full protocol: target training, stage-0, stages 1..T, reporting."""
    run = ScenarioRun(config, quiet=quiet)
    run.out.mkdir(parents=True, exist_ok=True)
    save_config(config, run.out / "config.yaml")
    run.ensure_target(resume=resume)
    run.ensure_stage0(resume=resume)
    record0 = run.evaluate_stage(0)
    (run.out / "record_stage0.json").write_text(json.dumps(record0.to_dict(), sort_keys=True, indent=2))
    run._say(f"stage 0: Acc {record0.adv_acc[0]:.3f}, clean {record0.clean_acc:.3f}")
    for stage in range(1, config.stages + 1):
        run.run_stage(stage, resume=resume)
    run.finish()
    return run.records


def emit_report(
    records: list[StageRecord],
    out_dir: str | Path,
    *,
    config: ScenarioConfig | None = None,
    formats: tuple = ("json", "table"),
    make_plot: bool = False,
) -> list[Path]:
    """Write the machine-readable results file, the per-stage accuracy table,
    and (optionally) an accuracy-vs-stage plot. Outputs carry no timestamps so
    re-emitting the same records is byte-identical."""
    if not records:
        raise EvaluationError("emit_report needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        payload = {
            "config_hash": config_hash(config) if config else None,
            "seed": config.seed if config else None,
            "version": __version__,
            "config": config_to_dict(config) if config else None,
            "records": [r.to_dict() for r in records],
        }
        path = out / "results.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        written.append(path)
    if "table" in formats:
        path = out / "table.md"
        path.write_text(render_table(records))
        written.append(path)
    if make_plot:
        path = out / "accuracy.png"
        _plot_records(records, path)
        written.append(path)
    return written


def render_table(records: list[StageRecord]) -> str:
    """Per-stage accuracy table: one row per stage, one column per seen attack."""
    all_names: list[str] = []
    for record in records:
        for name in record.attack_names:
            all_names.append(name)
    header = ["stage"] + [f"{k}:{name}" for k, name in enumerate(all_names)] + ["clean", "AIAcc"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for record in records:
        cells = [str(record.stage)]
        cells += [f"{acc:.6f}" for acc in record.adv_acc]
        cells += [""] * (len(all_names) - len(record.adv_acc))
        cells += [f"{record.clean_acc:.6f}", f"{record.aiacc:.6f}"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _plot_records(records: list[StageRecord], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stages = [r.stage for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(stages, [r.clean_acc for r in records], marker="o", label="clean")
    ax.plot(stages, [r.aiacc for r in records], marker="s", label="AIAcc")
    ax.plot(stages, [r.adv_acc[0] for r in records], marker="^", label="initial attack")
    ax.set_xlabel("stage")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def load_records(out_dir: str | Path) -> list[StageRecord]:
    payload = json.loads((Path(out_dir) / "results.json").read_text())
    return [StageRecord.from_dict(r) for r in payload["records"]]
