"""Training loop: adaptive-moment optimizer, stepped rate decay, early stop.

The backbone stays frozen (excluded from the optimizer); checkpoints are
written every epoch plus a ``best.pt`` tracking the lowest epoch loss. With
a fixed seed and sequential loading the run is bitwise reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..data import FramePair, PairDataset
from ..exceptions import NonFiniteLoss, NoPairs
from ..geometry import RigidTransform
from ..loss import total_loss
from ..model import TwoLayerPoseRegressor, build_model, save_checkpoint
from .config import TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False


def _make_loader(dataset, cfg: TrainConfig):
    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    return torch.utils.data.DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=gen,
        num_workers=cfg.num_workers,
        drop_last=False,
    )


def train(cfg: TrainConfig, pairs: list[FramePair], out_dir, model: TwoLayerPoseRegressor | None = None) -> TrainResult:
    """Fit the regressor on frame pairs; returns checkpoint paths and the
    per-epoch loss history.

    Early stop fires when the epoch training loss has not improved on its
    best value for ``cfg.patience`` consecutive epochs (so never before
    patience + 1 epochs). ``cfg.max_steps`` caps total optimizer steps for
    smoke runs.
    """
    if not pairs:
        raise NoPairs("training requires at least one frame pair")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed % (2**32))
    if model is None:
        model = build_model(
            cfg.motion,
            backbone=cfg.backbone,
            window_radius=cfg.window_radius,
            normalize_correlation=cfg.normalize_correlation,
            seed=cfg.seed,
        )
    model.train()
    model.backbone.eval()

    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.learning_rate)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=cfg.decay_interval, gamma=cfg.decay_factor)
    loader = _make_loader(PairDataset(pairs), cfg)

    result = TrainResult(best_path=out_dir / "best.pt", last_path=out_dir / "last.pt")
    best_loss = float("inf")
    stale_epochs = 0
    budget_exhausted = False

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_total = 0.0
        batches = 0
        for batch in loader:
            optimizer.zero_grad()
            est = model(batch["rgb_q"], batch["rgb_r"], batch["depth_r"], batch["K"])
            gt = RigidTransform(batch["R_gt"], batch["t_gt"])
            loss = total_loss(est, gt, cfg.weights).mean()
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, step {result.steps}",
                    batch_ids=batch["index"].tolist(),
                )
            loss.backward()
            optimizer.step()
            result.steps += 1
            epoch_total += float(loss.detach())
            batches += 1
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                budget_exhausted = True
                break
        epoch_loss = epoch_total / max(batches, 1)
        result.epoch_losses.append(epoch_loss)
        logger.info(
            "epoch %d/%d loss %.6f lr %.2e steps %d",
            epoch, cfg.max_epochs, epoch_loss, optimizer.param_groups[0]["lr"], result.steps,
        )

        save_checkpoint(out_dir / f"epoch-{epoch:03d}.pt", model, cfg.backbone, cfg.seed, extra={"epoch": epoch})
        save_checkpoint(result.last_path, model, cfg.backbone, cfg.seed, extra={"epoch": epoch})
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            stale_epochs = 0
            save_checkpoint(result.best_path, model, cfg.backbone, cfg.seed, extra={"epoch": epoch})
        else:
            stale_epochs += 1
            if stale_epochs >= cfg.patience:
                logger.info("early stop after epoch %d (%d stale epochs)", epoch, stale_epochs)
                result.stopped_early = True
                break
        if budget_exhausted:
            break
        scheduler.step()

    if not result.best_path.exists():  # first epoch never improved on +inf is impossible, but be safe
        save_checkpoint(result.best_path, model, cfg.backbone, cfg.seed)
    return result
