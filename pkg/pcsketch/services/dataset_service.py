import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

# Local imports
from ..exceptions import DatasetError, IndexOutOfRangeError
from ..models import Dataset, SparseVector

logger = logging.getLogger(__name__)

NAME_COLUMNS = ("city", "city_ascii", "name", "city_name")
POPULATION_COLUMNS = ("population", "pop")

# Published totals for the FIMI files: (max_basket, distinct ids, total items)
KNOWN_TOTALS = {
    "kosarak": (100, 40148, 7264322),
    "retail": (30, 16243, 888317),
}


class DatasetService:
    def load_cities_csv(self, path: Union[str, Path]) -> Dataset:
        """
        One index per distinct city name in first-seen order, valued by population.
        Rows with a blank population are skipped; duplicate names are summed.
        """
        path = Path(path)
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
        except pd.errors.EmptyDataError as e:
            raise DatasetError(f"{path} is empty") from e
        if frame.empty:
            raise DatasetError(f"{path} has a header but no rows")

        columns = {c.strip().lower(): c for c in frame.columns}
        name_col = next((columns[c] for c in NAME_COLUMNS if c in columns), None)
        pop_col = next((columns[c] for c in POPULATION_COLUMNS if c in columns), None)
        if name_col is None or pop_col is None:
            raise DatasetError(
                f"{path} needs a city name column {NAME_COLUMNS} and a population column "
                f"{POPULATION_COLUMNS}; found {list(frame.columns)}"
            )

        names = frame[name_col].str.strip()
        raw = frame[pop_col].str.strip()
        blank = raw == ""
        population = pd.to_numeric(raw.where(~blank), errors="coerce")
        bad = population.isna() & ~blank
        if bad.any():
            row = int(bad.idxmax())
            raise DatasetError(f"non-numeric population {raw[row]!r} for {names[row]!r} (row {row + 1})")
        kept = ~blank
        population = population[kept]
        if (population < 0).any() or (population != np.floor(population)).any():
            raise DatasetError("populations must be nonnegative integers")
        if not kept.any():
            raise DatasetError(f"{path} has no rows with a population")

        totals = population.groupby(names[kept], sort=False).sum()
        duplicates = int(kept.sum()) - len(totals)
        if duplicates:
            logger.warning(f"⚠️ {duplicates} duplicate city names in {path.name} were merged by summing")
        skipped = int(blank.sum())
        if skipped:
            logger.warning(f"⚠️ Skipped {skipped} rows of {path.name} with no population")

        d = len(totals)
        dataset = Dataset(
            name=path.stem,
            keys=[str(key) for key in totals.index],
            vector=SparseVector(dimension=d, indices=np.arange(d), values=totals.to_numpy(dtype=np.float64)),
            stats={"rows": len(frame), "missing_population": skipped, "duplicate_names_merged": duplicates}
        )
        logger.info(f"Loaded {d} cities from {path.name}")
        return dataset

    def load_transactions(self, path: Union[str, Path], max_basket: int) -> Dataset:
        """
        FIMI format: one basket per line, whitespace-separated integer item ids. Each
        basket is deduplicated (first occurrence kept) and truncated to max_basket items.
        """
        if max_basket < 1:
            raise DatasetError(f"max_basket must be at least 1, got {max_basket}")
        path = Path(path)
        index: Dict[str, int] = {}
        keys: List[str] = []
        items: List[int] = []
        offsets = [0]
        stats = {"lines": 0, "rejected_lines": 0, "truncated_baskets": 0,
                 "truncated_items": 0, "duplicate_items": 0}

        with path.open(encoding="utf-8") as handle:
            for line in handle:
                stats["lines"] += 1
                try:
                    ids = [int(token) for token in line.split()]
                except ValueError:
                    stats["rejected_lines"] += 1
                    continue
                basket = list(dict.fromkeys(ids))
                stats["duplicate_items"] += len(ids) - len(basket)
                if len(basket) > max_basket:
                    stats["truncated_baskets"] += 1
                    stats["truncated_items"] += len(basket) - max_basket
                    basket = basket[:max_basket]
                for item in basket:
                    key = str(item)
                    position = index.get(key)
                    if position is None:
                        position = index[key] = len(keys)
                        keys.append(key)
                    items.append(position)
                offsets.append(len(items))

        if stats["lines"] == 0:
            raise DatasetError(f"{path} is empty")
        if not keys:
            raise DatasetError(f"{path} contains no valid items")
        if stats["rejected_lines"]:
            logger.warning(f"⚠️ Rejected {stats['rejected_lines']} lines of {path.name} with non-integer tokens")

        basket_items = np.asarray(items, dtype=np.int64)
        d = len(keys)
        counts = np.bincount(basket_items, minlength=d).astype(np.float64)
        stats["total_items"] = len(items)
        dataset = Dataset(
            name=path.stem,
            keys=keys,
            vector=SparseVector(dimension=d, indices=np.arange(d), values=counts),
            basket_items=basket_items,
            basket_offsets=np.asarray(offsets, dtype=np.int64),
            max_basket=max_basket,
            stats=stats
        )
        logger.info(f"Loaded {dataset.n_baskets} baskets, {d} distinct ids, {len(items)} items from {path.name}")
        return dataset

    def load_dataset(self, path: Union[str, Path], kind: str, max_basket: Optional[int] = None) -> Dataset:
        if kind == "cities":
            return self.load_cities_csv(path)
        if kind == "transactions":
            if max_basket is None:
                max_basket = KNOWN_TOTALS.get(Path(path).stem, (100,))[0]
                logger.info(f"Using max_basket={max_basket} for {Path(path).name}")
            return self.load_transactions(path, max_basket)
        raise DatasetError(f"unknown dataset kind '{kind}'")

    def neighboring_pair(self, dataset: Dataset, basket_index: int) -> Tuple[SparseVector, SparseVector]:
        """The aggregate vector and the same vector without one basket's contribution."""
        if not dataset.has_baskets:
            raise DatasetError(f"dataset '{dataset.name}' has no baskets")
        if not 0 <= basket_index < dataset.n_baskets:
            raise IndexOutOfRangeError(f"basket {basket_index} outside [0, {dataset.n_baskets})")
        full = dataset.vector
        values = full.values.copy()
        positions = np.searchsorted(full.indices, dataset.basket(basket_index))
        np.subtract.at(values, positions, 1.0)
        return full, SparseVector(dimension=full.dimension, indices=full.indices, values=values)

    def check_known_totals(self, dataset: Dataset) -> Optional[str]:
        """Describe a mismatch with the published FIMI totals, or None when they agree."""
        expected = KNOWN_TOTALS.get(dataset.name)
        if expected is None or dataset.max_basket != expected[0]:
            return None
        _, distinct, total = expected
        actual = (dataset.dimension, int(dataset.total_count))
        if actual == (distinct, total):
            return None
        return (
            f"{dataset.name}: expected {distinct} distinct ids and {total} items, "
            f"got {actual[0]} and {actual[1]} (set semantics within baskets)"
        )


# Global dataset_service instance
dataset_service = DatasetService()
