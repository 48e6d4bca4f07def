import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from luminet.errors import DatasetWithoutPairsError
from luminet.models.dataset import DatasetManifest
from luminet.services.imaging import load_image


class ScenePairs(Dataset):
    """Same-scene (source, target) CHW pairs in [0, 1], drawn up front from a seeded PCG64 stream.

    The item list is fixed at construction, so batches arrive in the same
    order whatever the number of loader workers.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        image_size: int,
        n_items: int,
        seed: int,
        distinct: bool = True,
        unpaired_fraction: float = 0.0,
    ):
        self.manifest = manifest
        self.image_size = image_size
        groups = manifest.by_scene()
        paired = [recs for recs in groups.values() if len(recs) >= 2]
        single = [recs for recs in groups.values() if len(recs) == 1]
        if not paired:
            raise DatasetWithoutPairsError("dataset has no scene with two or more lighting conditions")

        rng = np.random.Generator(np.random.PCG64(seed))
        self.items = []
        for _ in range(n_items):
            if single and rng.random() < unpaired_fraction:
                record = single[rng.integers(len(single))][0]
                self.items.append((record, record))
                continue
            recs = paired[rng.integers(len(paired))]
            a, b = rng.choice(len(recs), size=2, replace=not distinct)
            self.items.append((recs[a], recs[b]))
        self._cache: dict[str, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.items)

    def _load(self, record) -> torch.Tensor:
        path = str(self.manifest.resolve(record))
        if path not in self._cache:
            self._cache[path] = load_image(path, self.image_size).permute(2, 0, 1).contiguous()
        return self._cache[path]

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        source, target = self.items[index]
        return self._load(source), self._load(target)


def pair_loader(dataset: ScenePairs, batch_size: int, num_workers: int = 0) -> DataLoader:
    return DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=num_workers, drop_last=False)
