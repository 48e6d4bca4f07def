import csv
import hashlib
from collections.abc import Iterable
from pathlib import Path

import torch
from torch import nn

from luminet.config import TrainConfig


class LossLog:
    """Append-only ``step,loss,lr`` CSV; keeps the rows in memory too"""

    header = ("step", "loss", "lr")

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[tuple[int, float, float]] = []
        if self.path is not None and self.path.exists():
            with open(self.path, newline="") as f:
                for row in csv.DictReader(f):
                    self.rows.append((int(row["step"]), float(row["loss"]), float(row["lr"])))

    def append(self, step: int, loss: float, lr: float) -> None:
        self.rows.append((step, loss, lr))
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new_file = not self.path.exists()
        with open(self.path, "a", newline="") as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(self.header)
            writer.writerow((step, f"{loss:.8g}", f"{lr:.8g}"))

    def losses(self) -> list[float]:
        return [loss for _, loss, _ in self.rows]

    @property
    def last_step(self) -> int:
        return self.rows[-1][0] if self.rows else 0


def make_optimizer(
    params: Iterable[nn.Parameter], cfg: TrainConfig
) -> tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LRScheduler]:
    """AdamW with step decay of ``lr_decay`` every ``lr_decay_every`` steps"""
    optimizer = torch.optim.AdamW(list(params), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=max(cfg.lr_decay_every, 1), gamma=cfg.lr_decay)
    return optimizer, scheduler


def parameter_digest(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def snapshot(named: Iterable[tuple[str, nn.Parameter]]) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in named}
