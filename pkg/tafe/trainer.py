from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config.settings import METADATA_DB, TAFE_VERSION
from models.run_metadata import RunMetadata
from models.scene import Sample
from models.tafe_config import RunConfig, TafeConfig
from tafe.errors import NumericError, ShapeError
from tafe.metrics import ABSENT_CLASS_RULE, ConfusionMatrix, confusion
from tafe.mia import TafeModel, clip_gradients, compute_loss, gradient_step, predict_classes
from tafe.persister import Persister, load_checkpoint
from tafe.synthdata import load_dataset, stack
from utils.logger import RunLogger

LOG_EVERY = 10


class Trainer:

    def __init__(
        self,
        command: str,
        config: Dict[str, Any],
        out_dir: str,
        metadata_db: str = METADATA_DB
    ):
        self.metadata = RunMetadata.create_new(
            command=command,
            tafe_version=TAFE_VERSION,
            config=config,
            output_dir=str(out_dir)
        )

        self.logger = RunLogger(self.metadata.run_id)
        self.persister = Persister(self.logger, out_dir, metadata_db)
        self.logger.info(f"Initialized {command} run writing to {out_dir}")

    def train(self, run: RunConfig) -> TafeModel:
        config = run.model
        self.logger.rule()
        self.logger.info(f"Starting training run: {self.metadata.run_id}")
        self.logger.rule()

        try:
            self.logger.info(f"Step 1: Loading dataset {run.data}...")
            samples, _ = load_dataset(run.data)
            self._check_samples(samples, config)
            images, masks = stack(samples)

            self.logger.info("Step 2: Initializing parameters...")
            model = TafeModel.initialize(config)
            self.logger.info(f"Model has {model.parameter_count} parameters over {len(model.params)} tensors")

            self.logger.info(f"Step 3: Gradient descent for {config.iterations} iterations...")
            model, losses = self._descend(model, images, masks)
            self.persister.save_loss_log(losses)

            if run.eval_data:
                self.logger.info(f"Step 4: Evaluating on {run.eval_data}...")
                eval_samples, _ = load_dataset(run.eval_data)
                metrics = self.score(model, eval_samples)
                self.persister.save_metrics(metrics)
                self.metadata.miou = metrics["miou"]
                self.metadata.mdice = metrics["mdice"]

            self.metadata.finish()
            self.persister.save_run_metadata(self.metadata)

            self.logger.rule()
            self.logger.info("Training run completed successfully!")
            self.logger.info(f"  - Iterations: {self.metadata.iterations_completed}")
            if self.metadata.final_loss is not None:
                self.logger.info(f"  - Final loss: {self.metadata.final_loss:.6f}")
            if self.metadata.miou is not None:
                self.logger.info(f"  - Held-out mIoU: {self.metadata.miou:.4f}")
            self.logger.info(f"  - Duration: {self.metadata.duration_seconds:.2f}s")
            self.logger.rule()
            return model

        except Exception as e:
            self._fail(e)
            raise

    def _descend(self, model: TafeModel, images: np.ndarray, masks: np.ndarray):
        config = model.config
        n = images.shape[0]
        losses: List[Dict[str, Any]] = []

        for t in range(config.iterations):
            # fixed-order batches wrap around the dataset
            index = [(t * config.batch_size + i) % n for i in range(config.batch_size)]
            loss, grads = compute_loss(model, images[index], masks[index])
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss} at iteration {t} (learning_rate={config.learning_rate})"
                )
            grads, norm = clip_gradients(grads, config.grad_clip)
            if not np.isfinite(norm):
                raise NumericError(f"non-finite gradient norm at iteration {t}")
            model = gradient_step(model, grads, config.learning_rate)
            losses.append({"iteration": t, "loss": loss})
            self.metadata.iterations_completed = t + 1
            self.metadata.final_loss = loss

            if t % LOG_EVERY == 0:
                self.logger.info(f"iteration {t}: loss {loss:.6f}, grad norm {norm:.4f}")
            if (t + 1) % config.checkpoint_every == 0:
                self.persister.save_checkpoint(config, model.params, t + 1)
                self.persister.save_loss_log(losses)

        if config.iterations == 0 or config.iterations % config.checkpoint_every:
            self.persister.save_checkpoint(config, model.params, config.iterations)
        return model, losses

    def evaluate(
        self,
        checkpoint: str,
        data_dir: str,
        out_path: Optional[str] = None,
        oracle: bool = False
    ) -> Dict[str, Any]:
        self.logger.rule()
        self.logger.info(f"Starting evaluation run: {self.metadata.run_id}")
        self.logger.rule()

        try:
            self.logger.info(f"Step 1: Loading checkpoint {checkpoint}...")
            config, params, iteration = load_checkpoint(checkpoint)
            model = TafeModel(config, params)
            self.logger.info(f"Checkpoint taken at iteration {iteration}")

            self.logger.info(f"Step 2: Loading dataset {data_dir}...")
            samples, _ = load_dataset(data_dir)

            self.logger.info("Step 3: Scoring predictions...")
            if oracle:
                self.logger.warning("Oracle mode: ground truth is scored as the prediction")
            metrics = self.score(model, samples, oracle=oracle)
            self.persister.save_metrics(metrics, out_path)

            self.metadata.iterations_completed = iteration
            self.metadata.miou = metrics["miou"]
            self.metadata.mdice = metrics["mdice"]
            self.metadata.finish()
            self.persister.save_run_metadata(self.metadata)

            self.logger.rule()
            self.logger.info(f"Evaluation completed: mIoU {metrics['miou']:.4f}, mDice {metrics['mdice']:.4f}")
            self.logger.rule()
            return metrics

        except Exception as e:
            self._fail(e)
            raise

    def score(self, model: TafeModel, samples: Sequence[Sample], oracle: bool = False) -> Dict[str, Any]:
        """Argmax predictions scored against the masks; per-image matrices reduced in dataset order."""
        config = model.config
        self._check_samples(samples, config)
        images, masks = stack(samples)

        if oracle:
            predictions = masks
        else:
            batches = [
                predict_classes(model, images[i:i + config.batch_size])
                for i in range(0, len(samples), config.batch_size)
            ]
            predictions = np.concatenate(batches, axis=0)

        per_image = [confusion(predictions[i], masks[i], config.classes) for i in range(len(samples))]
        total = ConfusionMatrix.reduce(per_image, config.classes)
        per_class_iou, miou = total.miou()
        per_class_dice, mdice = total.mdice()

        return {
            "miou": miou,
            "mdice": mdice,
            "per_class_iou": per_class_iou,
            "per_class_dice": per_class_dice,
            "absent_classes": total.absent_classes(),
            "absent_class_rule": ABSENT_CLASS_RULE,
            "per_sample_miou": [
                {"seed": sample.seed, "miou": cm.miou()[1]}
                for sample, cm in zip(samples, per_image)
            ],
            "oracle": oracle,
            "config": config.to_dict(),
        }

    def _check_samples(self, samples: Sequence[Sample], config: TafeConfig):
        for sample in samples:
            if sample.image.shape[2:] != (config.height, config.width):
                raise ShapeError(
                    f"sample {sample.seed} is {sample.image.shape[2:]}, "
                    f"model expects ({config.height}, {config.width})"
                )

    def _fail(self, error: Exception):
        self.logger.error(f"{self.metadata.command} run failed: {error}")
        self.metadata.finish()
        self.metadata.error_summary["fatal_error"] = str(error)
        self.metadata.error_summary["error_type"] = type(error).__name__
        self.persister.save_run_metadata(self.metadata)

    def get_metadata(self) -> RunMetadata:
        return self.metadata

    @property
    def out_dir(self) -> Path:
        return self.persister.out_dir
