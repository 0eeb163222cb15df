from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcsketch.exceptions import DatasetError, IndexOutOfRangeError
from pcsketch.services.dataset_service import dataset_service

from .conftest import dataset_path

baskets = st.lists(st.lists(st.integers(min_value=0, max_value=30), max_size=12), min_size=1, max_size=30)


def test_two_city_file(write_file):
    path = write_file("cities.csv", "city,population\nA,10\nB,20\n")

    dataset = dataset_service.load_cities_csv(path)

    assert dataset.dimension == 2
    assert dataset.keys == ["A", "B"]
    assert dataset.vector.to_dict() == {0: 10.0, 1: 20.0}
    assert not dataset.has_baskets


def test_world_cities_layout_with_blank_populations(write_file):
    # GIVEN
    path = write_file(
        "worldcities.csv",
        'city,city_ascii,lat,lng,country,population\n'
        '"Tokyo","Tokyo",35.6,139.7,"Japan","37732000"\n'
        '"Nowhere","Nowhere",0,0,"X",""\n'
        '"Lyon","Lyon",45.7,4.8,"France","516092"\n'
    )

    # WHEN
    dataset = dataset_service.load_cities_csv(path)

    # THEN
    assert dataset.keys == ["Tokyo", "Lyon"]
    assert dataset.vector.values.tolist() == [37732000.0, 516092.0]
    assert dataset.stats["missing_population"] == 1


def test_duplicate_city_names_are_summed(write_file):
    path = write_file("dupes.csv", "city,population\nA,10\nB,1\nA,5\n")

    dataset = dataset_service.load_cities_csv(path)

    assert dataset.keys == ["A", "B"]
    assert dataset.vector.values.tolist() == [15.0, 1.0]
    assert dataset.stats["duplicate_names_merged"] == 1


@pytest.mark.parametrize("text", [
    "",
    "city,population\n",
    "town,people\nA,10\n",
    "city,population\nA,lots\n",
    "city,population\nA,-3\n",
    "city,population\nA,2.5\n",
])
def test_bad_city_files_are_rejected(write_file, text):
    path = write_file("bad.csv", text)

    with pytest.raises(DatasetError):
        dataset_service.load_cities_csv(path)


def test_dedup_then_truncate(write_file):
    path = write_file("tiny.dat", "1 2 2 3\n")

    dataset = dataset_service.load_transactions(path, max_basket=2)

    assert dataset.keys == ["1", "2"]
    assert dataset.vector.to_dict() == {0: 1.0, 1: 1.0}
    assert dataset.basket(0).tolist() == [0, 1]
    assert dataset.stats["duplicate_items"] == 1
    assert dataset.stats["truncated_baskets"] == 1


def test_non_integer_lines_are_rejected_and_counted(write_file):
    path = write_file("mixed.dat", "1 2\nfoo 3\n2 4\n")

    dataset = dataset_service.load_transactions(path, max_basket=10)

    assert dataset.stats["rejected_lines"] == 1
    assert dataset.n_baskets == 2
    assert dataset.keys == ["1", "2", "4"]
    assert dataset.vector.values.tolist() == [1.0, 2.0, 1.0]


def test_empty_transaction_file_is_an_error(write_file):
    with pytest.raises(DatasetError):
        dataset_service.load_transactions(write_file("empty.dat", ""), max_basket=5)


@settings(max_examples=30, deadline=None)
@given(rows=baskets, max_basket=st.integers(min_value=1, max_value=8))
def test_baskets_are_capped_and_counts_aggregate(rows, max_basket, tmp_path_factory):
    # GIVEN
    path = tmp_path_factory.mktemp("fimi") / "data.dat"
    path.write_text("".join(" ".join(map(str, row)) + "\n" for row in rows), encoding="utf-8")
    if not any(rows):
        with pytest.raises(DatasetError):
            dataset_service.load_transactions(path, max_basket)
        return

    # WHEN
    dataset = dataset_service.load_transactions(path, max_basket)

    # THEN
    assert dataset.n_baskets == len(rows)
    assert dataset.largest_basket <= max_basket
    expected = Counter()
    for row in rows:
        expected.update(list(dict.fromkeys(row))[:max_basket])
    index = dataset.index_map
    assert {int(key): dataset.vector.get(index[key]) for key in dataset.keys} == expected


def test_loading_is_deterministic(write_file):
    path = write_file("repeat.dat", "5 9 1\n9 2\n1\n")

    first = dataset_service.load_transactions(path, 3)
    second = dataset_service.load_transactions(path, 3)

    assert first.keys == second.keys
    np.testing.assert_array_equal(first.vector.values, second.vector.values)
    np.testing.assert_array_equal(first.basket_items, second.basket_items)


def test_neighboring_pair_removes_exactly_one_basket(write_file):
    # GIVEN
    dataset = dataset_service.load_transactions(write_file("pair.dat", "1 2 3\n2 3\n\n3\n"), 5)

    # WHEN
    full, without = dataset_service.neighboring_pair(dataset, 0)
    same, unchanged = dataset_service.neighboring_pair(dataset, 2)

    # THEN
    difference = full.to_dense() - without.to_dense()
    assert np.count_nonzero(difference) == 3
    assert set(difference[difference != 0]) == {1.0}
    np.testing.assert_array_equal(without.combine(full.combine(without, 1.0, -1.0)).to_dense(), full.to_dense())
    np.testing.assert_array_equal(same.to_dense(), unchanged.to_dense())


def test_neighboring_pair_errors(write_file):
    transactions = dataset_service.load_transactions(write_file("t.dat", "1 2\n"), 5)
    cities = dataset_service.load_cities_csv(write_file("c.csv", "city,population\nA,1\n"))

    with pytest.raises(IndexOutOfRangeError):
        dataset_service.neighboring_pair(transactions, 1)
    with pytest.raises(DatasetError):
        dataset_service.neighboring_pair(cities, 0)


def test_load_dataset_dispatch(write_file):
    path = write_file("retail.dat", "1 2\n")

    assert dataset_service.load_dataset(path, "transactions").max_basket == 30
    with pytest.raises(DatasetError):
        dataset_service.load_dataset(path, "parquet")


def test_summary_text_lists_totals(write_file):
    dataset = dataset_service.load_transactions(write_file("s.dat", "1 2\n2 3 3\n"), 5)

    text = dataset.summary_text()

    assert "distinct_ids: 3" in text
    assert "total_count: 4" in text
    assert "baskets: 2" in text


def test_known_totals_mismatch_is_reported(write_file):
    dataset = dataset_service.load_transactions(write_file("retail.dat", "1 2\n"), 30)

    assert "expected 16243 distinct ids" in dataset_service.check_known_totals(dataset)


@pytest.mark.slow
@pytest.mark.parametrize("variable, max_basket, distinct, total", [
    ("PCS_KOSARAK_PATH", 100, 40148, 7264322),
    ("PCS_RETAIL_PATH", 30, 16243, 888317),
])
def test_published_dataset_totals(variable, max_basket, distinct, total):
    dataset = dataset_service.load_transactions(dataset_path(variable), max_basket)

    assert (dataset.dimension, int(dataset.total_count)) == (distinct, total), dataset.summary_text()


@pytest.mark.slow
def test_world_cities_file():
    dataset = dataset_service.load_cities_csv(dataset_path("PCS_CITIES_PATH"))

    assert 30_000 <= dataset.dimension <= 50_000
