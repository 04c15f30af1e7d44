"""
Command implementations behind the CLI: dataset generation and import,
training, evaluation, the energy audit and the CR x T sweep.

Every command resolves and validates its inputs before writing anything.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

try:
    from .channel import ChannelDataset, synth_generate
    from .checkpoint import (
        checkpoint_from_trainer,
        load_checkpoint,
        restore_model,
        restore_trainer,
        save_checkpoint,
    )
    from .config import RunConfig, Settings, get_app_settings
    from .csif import convert_npy, load_dataset, save_dataset
    from .energy import EnergyReport, audit_model
    from .errors import ConfigError
    from .models import EnergyModel, EpochMetrics, EvaluationReport, SweepPoint, SystemConfig, TrainConfig
    from .performance_monitor import get_performance_monitor, track_operation
    from .trainer import Trainer, build_model, evaluate
except ImportError:
    from channel import ChannelDataset, synth_generate
    from checkpoint import (
        checkpoint_from_trainer,
        load_checkpoint,
        restore_model,
        restore_trainer,
        save_checkpoint,
    )
    from config import RunConfig, Settings, get_app_settings
    from csif import convert_npy, load_dataset, save_dataset
    from energy import EnergyReport, audit_model
    from errors import ConfigError
    from models import EnergyModel, EpochMetrics, EvaluationReport, SweepPoint, SystemConfig, TrainConfig
    from performance_monitor import get_performance_monitor, track_operation
    from trainer import Trainer, build_model, evaluate

logger = logging.getLogger(__name__)


def _writable(path: Path) -> Path:
    path = Path(path)
    if path.is_dir():
        raise ConfigError(f"Output path {path} is a directory")
    if not path.parent.exists():
        raise ConfigError(f"Output directory {path.parent} does not exist")
    return path


def _readable(path: Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{what} {path} does not exist")
    return path


def metrics_header(t_steps: int) -> List[str]:
    return (
        ["epoch", "lr", "loss"]
        + [f"nmse_step_{t}" for t in range(1, t_steps + 1)]
        + [f"lambda_{t}" for t in range(1, t_steps + 1)]
        + ["val_nmse_db"]
    )


def metrics_row(m: EpochMetrics) -> List[str]:
    val = "" if m.val_nmse_db is None else repr(m.val_nmse_db)
    return (
        [str(m.epoch + 1), repr(m.learning_rate), repr(m.loss)]
        + [repr(v) for v in m.step_nmse_db]
        + [repr(v) for v in m.lambdas]
        + [val]
    )


def train_drift(stored: TrainConfig, current: TrainConfig) -> Dict[str, Tuple[object, object]]:
    """Fields whose value differs between the checkpoint and the run, as (stored, current)."""
    old, new = stored.model_dump(), current.model_dump()
    return {key: (old[key], new[key]) for key in old if old[key] != new.get(key)}


def warn_train_drift(stored: TrainConfig, current: TrainConfig) -> Dict[str, Tuple[object, object]]:
    drift = train_drift(stored, current)
    if drift:
        changes = ", ".join(f"{key} {a!r} -> {b!r}" for key, (a, b) in drift.items())
        logger.warning(
            f"Training settings differ from the checkpoint ({changes}); "
            f"continuing with the run's values, so the result will not match an uninterrupted run"
        )
    return drift


class CodecCommands:
    """Pipeline commands; each returns what it produced."""

    def __init__(self, settings: Optional[Settings] = None):
        self.settings = settings or get_app_settings()
        self.performance_monitor = get_performance_monitor()

    def _log_phases(self, recent: int = 5) -> None:
        self.performance_monitor.log_summary()
        for m in self.performance_monitor.get_recent(recent):
            status = "ok" if m.success else f"failed: {m.error_message}"
            logger.debug(f"phase {m.phase} on {m.thread_name}: {m.duration or 0.0:.3f}s ({status})")

    @track_operation("gen_data")
    def gen_data(self, run: RunConfig, out: Path, count: Optional[int] = None) -> ChannelDataset:
        out = _writable(out)
        n = run.data.sample_count if count is None else count
        if n < 1:
            raise ConfigError("Sample count must be at least 1")
        logger.info(f"Generating {n} samples with seed {run.train.seed} (profile {run.profile})")
        rng = np.random.default_rng(run.train.seed)
        ds = synth_generate(
            run.system,
            (run.data.paths_min, run.data.paths_max),
            n,
            rng,
            angle_jitter=run.data.angle_jitter,
        )
        save_dataset(ds, out)
        return ds

    @track_operation("convert")
    def convert(self, source: Path, out: Path, input_scale: float = 25.0, rescale: bool = True) -> ChannelDataset:
        source = _readable(source, "Array file")
        out = _writable(out)
        if not input_scale > 0:
            raise ConfigError("input scale must be positive")
        return convert_npy(source, out, input_scale=input_scale, rescale=rescale)

    def train(
        self,
        run: RunConfig,
        data: Path,
        out: Path,
        *,
        metrics_path: Optional[Path] = None,
        val_data: Optional[Path] = None,
        resume: Optional[Path] = None,
        stop_after: Optional[int] = None,
    ) -> List[EpochMetrics]:
        out = _writable(out)
        metrics_path = _writable(metrics_path or out.with_name(out.name + ".metrics.csv"))
        if stop_after is not None and stop_after < 1:
            raise ConfigError("--stop-after must be at least 1")
        dims = (run.system.n_s, run.system.n_t)
        dataset = load_dataset(_readable(data, "Dataset"), expected_dims=dims)
        val_dataset = (
            load_dataset(_readable(val_data, "Validation dataset"), expected_dims=dims, split="val")
            if val_data is not None
            else None
        )

        if resume is not None:
            ckpt = load_checkpoint(_readable(resume, "Checkpoint"), expected_system=run.system)
            if ckpt.model_config != run.model:
                raise ConfigError("Checkpoint model configuration differs from the run configuration")
            model = restore_model(ckpt)
            if ckpt.train_config is None:
                trainer = Trainer(model, run.train)
            else:
                warn_train_drift(ckpt.train_config, run.train)
                trainer = restore_trainer(ckpt, model, run.train)
            logger.info(f"Resuming from {resume} at epoch {trainer.epoch}")
        else:
            model = build_model(run.system, run.model, run.train.seed)
            trainer = Trainer(model, run.train)

        self.performance_monitor.clear_history()
        conf_path = out.with_name(out.name + ".conf")
        conf_path.write_text(run.to_key_values(), encoding="utf-8")
        logger.info(
            f"Training {model.parameter_count():,} parameters on {len(dataset)} samples: "
            f"profile {run.profile}, seed {run.train.seed}, {run.train.epochs} epochs; "
            f"resolved configuration in {conf_path}"
        )
        append = resume is not None and metrics_path.exists()
        best_path = out.with_name(out.name + ".best")
        with open(metrics_path, "a" if append else "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if not append:
                writer.writerow(metrics_header(run.system.t_steps))

            def on_epoch(metrics: EpochMetrics, t: Trainer) -> None:
                writer.writerow(metrics_row(metrics))
                if self.settings.metrics_flush:
                    fh.flush()
                if val_dataset is not None and t.best_epoch == metrics.epoch:
                    t.refresh_lambda(dataset.planes)
                    save_checkpoint(checkpoint_from_trainer(t), best_path)
                    logger.info(f"New best validation NMSE {t.best_val_db:.3f} dB at epoch {metrics.epoch + 1}")

            with self.performance_monitor.track("train"):
                history = trainer.fit(dataset, val_dataset=val_dataset, on_epoch=on_epoch, stop_after=stop_after)

        save_checkpoint(checkpoint_from_trainer(trainer), out)
        if trainer.epoch < run.train.epochs:
            logger.info(f"Stopped after epoch {trainer.epoch} of {run.train.epochs}; resume with --checkpoint {out}")
        if trainer.best_epoch is not None:
            logger.info(f"Best validation epoch {trainer.best_epoch + 1}: {trainer.best_val_db:.3f} dB")
        self._log_phases()
        return history

    @track_operation("eval")
    def evaluate(self, checkpoint: Path, data: Path) -> EvaluationReport:
        ckpt = load_checkpoint(_readable(checkpoint, "Checkpoint"))
        dataset = load_dataset(_readable(data, "Dataset"), expected_dims=(ckpt.system.n_s, ckpt.system.n_t), split="test")
        model = restore_model(ckpt)
        return evaluate(model, dataset.planes, ckpt.lambdas, over_the_wire=True)

    def energy(
        self,
        checkpoint: Path,
        data: Path,
        out: Path,
        *,
        energy_model: Optional[EnergyModel] = None,
        limit: Optional[int] = None,
    ) -> EnergyReport:
        out = _writable(out)
        ckpt = load_checkpoint(_readable(checkpoint, "Checkpoint"))
        dataset = load_dataset(_readable(data, "Dataset"), expected_dims=(ckpt.system.n_s, ckpt.system.n_t), split="test")
        if limit is not None and limit < 1:
            raise ConfigError("Sample limit must be at least 1")
        planes = dataset.planes if limit is None else dataset.planes[:limit]
        model = restore_model(ckpt)
        self.performance_monitor.clear_history()
        with self.performance_monitor.track("energy"):
            report = audit_model(model, planes, ckpt.lambdas, energy_model, workers=self.settings.audit_workers)
        report.write(out)
        self._log_phases()
        return report


    def sweep(
        self,
        run: RunConfig,
        data: Path,
        test_data: Path,
        out: Path,
        *,
        cr_values: Sequence[int],
        t_values: Sequence[int],
        ablation: bool = True,
        limit: Optional[int] = None,
    ) -> List[SweepPoint]:
        """Train one codec per (CR, T) point, with the no-PR ablation next to
        each PR model, and tabulate final NMSE against link energy.

        Every point starts from the run's seed and training settings; only the
        compression ratio, the step count and the PR switch change.
        """
        out = _writable(out)
        if not cr_values or not t_values:
            raise ConfigError("Sweep needs at least one CR and one T value")
        if limit is not None and limit < 1:
            raise ConfigError("Sample limit must be at least 1")
        grid = []
        for cr in cr_values:
            for t_steps in t_values:
                try:
                    system = SystemConfig(**{**run.system.model_dump(), "cr": cr, "t_steps": t_steps})
                except ValidationError as e:
                    raise ConfigError(f"Invalid sweep point CR={cr}, T={t_steps}: {e}") from e
                for progressive in (True, False) if ablation else (True,):
                    grid.append((system, run.model.model_copy(update={"progressive": progressive})))

        dims = (run.system.n_s, run.system.n_t)
        dataset = load_dataset(_readable(data, "Dataset"), expected_dims=dims)
        test = load_dataset(_readable(test_data, "Test dataset"), expected_dims=dims, split="test")
        audit_planes = test.planes if limit is None else test.planes[:limit]

        self.performance_monitor.clear_history()
        points: List[SweepPoint] = []
        with open(out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SweepPoint.HEADER)
            for index, (system, model_cfg) in enumerate(grid, start=1):
                variant = "PR" if model_cfg.progressive else "no-PR"
                logger.info(f"Sweep point {index}/{len(grid)}: CR={system.cr} T={system.t_steps} {variant}")
                with self.performance_monitor.track("sweep_point"):
                    model = build_model(system, model_cfg, run.train.seed)
                    trainer = Trainer(model, run.train)
                    trainer.fit(dataset)
                    report = evaluate(model, test.planes, trainer.lambdas, over_the_wire=True)
                    audit = audit_model(
                        model, audit_planes, trainer.lambdas, run.energy, workers=self.settings.audit_workers
                    )
                point = SweepPoint(
                    cr=system.cr,
                    t_steps=system.t_steps,
                    progressive=model_cfg.progressive,
                    feedback_bits=report.feedback_bits,
                    lambdas=list(trainer.lambdas.values),
                    step_nmse_db=report.step_nmse_db,
                    final_nmse_db=report.final_nmse_db,
                    energy_uj=audit.total_joules * 1e6,
                    ut_extra_uj=audit.ut_extra_joules * 1e6,
                    codeword_rate=audit.codeword_rate,
                )
                writer.writerow(point.to_row())
                if self.settings.metrics_flush:
                    fh.flush()
                logger.info(
                    f"CR={point.cr} T={point.t_steps} {variant}: {point.final_nmse_db:.3f} dB, "
                    f"{point.energy_uj:.4f} uJ"
                )
                points.append(point)
        self._log_phases()
        return points
