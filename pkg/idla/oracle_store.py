import json
import logging
import sqlite3
from dataclasses import dataclass
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Optional, Union

from idla.errors import IdlaError
from idla.exact_oracle import ShapeDistribution, cluster_distribution_exact, parse_shape_key, shape_key

log = logging.getLogger(__name__)


# ---------------------------
# Helpers
# ---------------------------

def oracle_key(k: int, dim: int, exact_limit: int) -> str:
    return f"shape:k={int(k)}:d={int(dim)}:exact={int(exact_limit)}"


def ensure_oracle_cache_schema(db_path: Union[str, Path]) -> None:
    """Creates the cache table; called on every store construction."""
    with sqlite3.connect(db_path) as con:
        con.execute(
            """
            CREATE TABLE IF NOT EXISTS oracle_cache (
                key TEXT PRIMARY KEY,
                payload_json TEXT NOT NULL,
                computed_at TEXT NOT NULL
            )
            """
        )
        con.execute(
            "CREATE INDEX IF NOT EXISTS idx_oracle_cache_computed_at ON oracle_cache(computed_at)"
        )
        con.commit()


def distribution_to_payload(dist: ShapeDistribution) -> Dict[str, Any]:
    shapes = []
    for shape, p in sorted(dist.probabilities.items(), key=lambda kv: sorted(kv[0])):
        prob = str(p) if isinstance(p, Fraction) else format(float(p), ".17g")
        shapes.append({"shape": shape_key(shape), "probability": prob})
    return {"dim": dist.dim, "shapes": shapes}


def payload_to_distribution(payload: Dict[str, Any]) -> ShapeDistribution:
    try:
        probs = {parse_shape_key(row["shape"]): Fraction(row["probability"]) for row in payload["shapes"]}
        return ShapeDistribution(int(payload["dim"]), probs)
    except (KeyError, TypeError, ValueError) as e:
        raise IdlaError(f"corrupt oracle cache payload: {e}") from e


# ---------------------------
# Config
# ---------------------------

@dataclass
class OracleStoreConfig:
    # rational solves up to this cluster size, float elimination above
    exact_limit: int = 20
    residual_tol: float = 1e-10


# ---------------------------
# Store
# ---------------------------

class OracleStore:
    def __init__(self, db_path: Union[str, Path], cfg: Optional[OracleStoreConfig] = None):
        self.db_path = str(db_path)
        self.cfg = cfg or OracleStoreConfig()
        ensure_oracle_cache_schema(self.db_path)

    # ---- public API ----

    def get_distribution(self, k: int, dim: int, force_refresh: bool = False) -> ShapeDistribution:
        """
        Exact shape law after k explorers. Served from SQLite unless
        force_refresh=True; misses are computed and stored.
        """
        key = oracle_key(k, dim, self.cfg.exact_limit)

        if not force_refresh:
            cached = self._cache_get(key)
            if cached is not None:
                log.debug("oracle cache hit %s", key)
                return payload_to_distribution(cached)

        log.info("computing exact shape distribution k=%d d=%d", k, dim)
        dist = cluster_distribution_exact(k, dim, self.cfg.exact_limit, self.cfg.residual_tol)
        self._cache_put(key, distribution_to_payload(dist))
        return dist

    def keys(self) -> list:
        with sqlite3.connect(self.db_path) as con:
            return [r[0] for r in con.execute("SELECT key FROM oracle_cache ORDER BY key").fetchall()]

    # ---- cache ----

    def _cache_get(self, key: str) -> Optional[Dict[str, Any]]:
        with sqlite3.connect(self.db_path) as con:
            row = con.execute(
                "SELECT payload_json FROM oracle_cache WHERE key=?",
                (key,),
            ).fetchone()
            if not row:
                return None
            return json.loads(row[0])

    def _cache_put(self, key: str, payload: Dict[str, Any]) -> None:
        now = datetime.now(timezone.utc).isoformat()
        with sqlite3.connect(self.db_path) as con:
            con.execute(
                """
                INSERT INTO oracle_cache(key, computed_at, payload_json)
                VALUES (?, ?, ?)
                ON CONFLICT(key) DO UPDATE SET
                    computed_at=excluded.computed_at,
                    payload_json=excluded.payload_json
                """,
                (key, now, json.dumps(payload, ensure_ascii=False)),
            )
            con.commit()
