"""Run bookkeeping: per-stage timing records, warnings and written outputs."""
import hashlib
import logging
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from app.core.config import settings
from app.models.schemas import RunReport

logger = logging.getLogger(__name__)


@dataclass
class StageRecord:
    run_id: str
    stage: str
    latency_ms: float
    metadata: dict = field(default_factory=dict)
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "latency_ms": self.latency_ms,
            "metadata": self.metadata,
            "timestamp": self.timestamp.isoformat(),
            "error": self.error,
        }


class RunLog:
    """Collects what a single command did so it can be written as a RunReport."""

    def __init__(self, command: list[str] | None = None):
        self.run_id = str(uuid.uuid4())[:8]
        self.command = command or []
        self.config_hash: str | None = None
        self._stages: list[StageRecord] = []
        self._warnings: list[str] = []
        self._outputs: list[str] = []

    def hash_config(self, payload: bytes | str) -> str:
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        self.config_hash = hashlib.sha256(payload).hexdigest()[:16]
        return self.config_hash

    @contextmanager
    def stage(self, name: str, **metadata):
        """Time a stage; failures are recorded and re-raised."""
        start = time.perf_counter()
        error = None
        try:
            yield metadata
        except Exception as e:
            error = str(e)
            raise
        finally:
            latency_ms = (time.perf_counter() - start) * 1000
            self._stages.append(
                StageRecord(
                    run_id=self.run_id,
                    stage=name,
                    latency_ms=round(latency_ms, 3),
                    metadata=metadata,
                    error=error,
                )
            )
            logger.info(f"Run [{self.run_id}] stage={name} latency={latency_ms:.1f}ms")

    def warn(self, message: str):
        if message not in self._warnings:
            logger.warning(f"Run [{self.run_id}] {message}")
            self._warnings.append(message)

    def assume(self, name: str, value) -> None:
        """Record an assumed-but-unpublished default as a warning."""
        self.warn(f"assumption: {name}={value} (not published, default used)")

    def record_output(self, path: Path | str):
        self._outputs.append(str(path))

    @property
    def warnings(self) -> list[str]:
        return list(self._warnings)

    @property
    def outputs(self) -> list[str]:
        return list(self._outputs)

    def get_stage_stats(self) -> dict:
        if not self._stages:
            return {"total_stages": 0}
        return {
            "total_stages": len(self._stages),
            "total_latency_ms": round(sum(s.latency_ms for s in self._stages), 3),
            "errors": sum(1 for s in self._stages if s.error),
        }

    def to_report(self) -> dict:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "config_hash": self.config_hash,
            "stages": [s.to_dict() for s in self._stages],
            "stats": self.get_stage_stats(),
            "outputs": self.outputs,
            "warnings": self.warnings,
        }

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "report.json"
        self.record_output(path)
        path.write_text(RunReport(**self.to_report()).model_dump_json(indent=2))
        return path


def default_assumptions() -> dict:
    return {
        "sigma": settings.HEATMAP_SIGMA,
        "margin": settings.BOX_MARGIN,
        "alpha": settings.DISTILL_ALPHA,
        "oks_constants": settings.OKS_CONSTANTS_PATH.name,
    }
