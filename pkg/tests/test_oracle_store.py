import json
import sqlite3
from fractions import Fraction

import pytest

import idla.oracle_store as oracle_store
from idla.errors import IdlaError, NumericError
from idla.oracle_store import (
    OracleStore,
    OracleStoreConfig,
    distribution_to_payload,
    oracle_key,
    payload_to_distribution,
)


def test_schema_is_created(tmp_path):
    db = tmp_path / "oracle.sqlite"
    OracleStore(db)
    with sqlite3.connect(db) as con:
        tables = {r[0] for r in con.execute("SELECT name FROM sqlite_master WHERE type='table'")}
    assert "oracle_cache" in tables


def test_distribution_is_cached(tmp_path, monkeypatch):
    store = OracleStore(tmp_path / "oracle.sqlite")
    first = store.get_distribution(2, 2)
    assert all(p == Fraction(1, 4) for p in first.probabilities.values())
    assert store.keys() == [oracle_key(2, 2, 20)]

    def boom(*args, **kwargs):
        raise AssertionError("cache miss")

    monkeypatch.setattr(oracle_store, "cluster_distribution_exact", boom)
    again = store.get_distribution(2, 2)
    assert again.probabilities == first.probabilities


def test_force_refresh_recomputes(tmp_path, monkeypatch):
    store = OracleStore(tmp_path / "oracle.sqlite")
    store.get_distribution(1, 2)
    calls = []
    real = oracle_store.cluster_distribution_exact

    def counting(*args, **kwargs):
        calls.append(args)
        return real(*args, **kwargs)

    monkeypatch.setattr(oracle_store, "cluster_distribution_exact", counting)
    store.get_distribution(1, 2, force_refresh=True)
    assert len(calls) == 1
    assert store.keys() == [oracle_key(1, 2, 20)]


def test_payload_keeps_exact_fractions(tmp_path):
    store = OracleStore(tmp_path / "oracle.sqlite")
    dist = store.get_distribution(3, 2)
    payload = json.loads(json.dumps(distribution_to_payload(dist)))
    assert payload_to_distribution(payload).probabilities == dist.probabilities


def test_corrupt_payload():
    with pytest.raises(IdlaError):
        payload_to_distribution({"dim": 2, "shapes": [{"shape": "0,0"}]})


def test_float_solves_agree_with_exact_ones(tmp_path):
    exact = OracleStore(tmp_path / "exact.sqlite").get_distribution(3, 2)
    floats = OracleStore(tmp_path / "float.sqlite", OracleStoreConfig(exact_limit=0)).get_distribution(3, 2)
    assert set(floats.probabilities) == set(exact.probabilities)
    for shape, p in exact.probabilities.items():
        assert float(floats.probabilities[shape]) == pytest.approx(float(p), abs=1e-12)


def test_residual_tolerance_reaches_the_solver(tmp_path):
    store = OracleStore(tmp_path / "oracle.sqlite", OracleStoreConfig(exact_limit=0, residual_tol=-1.0))
    with pytest.raises(NumericError):
        store.get_distribution(2, 2)
    assert store.keys() == []
