"""
Queue of independent method runs.

Runs execute inline (max_workers = 1) or in worker processes. Each run reseeds itself, so
both modes give identical results. The first failure is re-raised once every run has
finished, after its status has been recorded.

Key Features:
- Status tracking per run (queued, running, completed, failed)
- Inline or process-pool execution
- Status summary for logging and run metadata
"""

import logging
import threading
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

logger = logging.getLogger(__name__)


class RunStatus(Enum):
  """Status of a queued run."""
  QUEUED = "queued"
  RUNNING = "running"
  COMPLETED = "completed"
  FAILED = "failed"


@dataclass
class RunItem:
  """One queued run: a picklable top-level function and its arguments."""
  label: str
  function: Callable[..., Any]
  args: tuple = ()
  run_id: str = field(default_factory=lambda: str(uuid.uuid4()))
  status: RunStatus = RunStatus.QUEUED
  result: Any = None
  error: Optional[BaseException] = None
  started: Optional[datetime] = None
  finished: Optional[datetime] = None

  def __post_init__(self):
    if not self.label:
      raise ValueError("Run label cannot be empty")

  def to_dict(self) -> Dict[str, Any]:
    return {
        "run_id": self.run_id,
        "label": self.label,
        "status": self.status.value,
        "error": str(self.error) if self.error else "",
        "started": self.started.isoformat() if self.started else None,
        "finished": self.finished.isoformat() if self.finished else None,
    }


class RunQueue:
  """
  Executes queued runs and keeps their status.

  Args:
      max_workers: 1 runs inline in this process; more uses a process pool
  """

  def __init__(self, max_workers: int = 1):
    if max_workers < 1:
      raise ValueError("max_workers must be at least 1")
    self.max_workers = max_workers
    self._items: List[RunItem] = []
    self._lock = threading.RLock()
    logger.info("RunQueue initialized (workers: %d)", max_workers)

  def add(self, label: str, function: Callable[..., Any], *args) -> RunItem:
    with self._lock:
      if any(item.label == label for item in self._items):
        raise ValueError(f"A run labelled {label!r} is already queued")
      item = RunItem(label=label, function=function, args=args)
      self._items.append(item)
      logger.debug("Queued run %s (%s)", label, item.run_id)
      return item

  def run_all(self) -> Dict[str, Any]:
    """
    Execute every queued run.

    Returns:
        Dict[str, Any]: Results keyed by label, in queue order

    Raises:
        BaseException: The first failure, after all runs have finished
    """
    with self._lock:
      pending = [item for item in self._items if item.status is RunStatus.QUEUED]

    if self.max_workers == 1 or len(pending) <= 1:
      for item in pending:
        self._mark_running(item)
        try:
          self._complete(item, item.function(*item.args))
        except Exception as e:  # pylint: disable=broad-exception-caught
          self._fail(item, e)
    else:
      with ProcessPoolExecutor(max_workers=self.max_workers) as pool:
        futures = []
        for item in pending:
          self._mark_running(item)
          futures.append((item, pool.submit(item.function, *item.args)))
        for item, future in futures:
          try:
            self._complete(item, future.result())
          except Exception as e:  # pylint: disable=broad-exception-caught
            self._fail(item, e)

    failed = [item for item in pending if item.status is RunStatus.FAILED]
    if failed:
      raise failed[0].error
    return {item.label: item.result for item in pending}

  def _mark_running(self, item: RunItem) -> None:
    with self._lock:
      item.status = RunStatus.RUNNING
      item.started = datetime.now()
    logger.info("Running %s", item.label)

  def _complete(self, item: RunItem, result: Any) -> None:
    with self._lock:
      item.status = RunStatus.COMPLETED
      item.result = result
      item.finished = datetime.now()
    logger.info("Run %s completed", item.label)

  def _fail(self, item: RunItem, error: BaseException) -> None:
    with self._lock:
      item.status = RunStatus.FAILED
      item.error = error
      item.finished = datetime.now()
    logger.error("Run %s failed: %s", item.label, str(error))

  def get_status(self) -> Dict[str, Any]:
    with self._lock:
      counts = {status.value: 0 for status in RunStatus}
      for item in self._items:
        counts[item.status.value] += 1
      return {"total": len(self._items), "counts": counts, "runs": [item.to_dict() for item in self._items]}
