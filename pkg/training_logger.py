#!/usr/bin/env python3
"""
training_logger.py
Training log: one JSON record per line for iterations, steepness updates,
divergence events, checkpoints and learning-rate changes.
"""

import os
from typing import Any, Dict, List, Optional

import pandas as pd
import structlog


def _plain(value: Any) -> Any:
    if hasattr(value, "item"):
        return value.item()
    return value


class TrainingLogger:
    """Class to handle training-log records and their NDJSON file."""

    def __init__(self, log_file_path: Optional[str] = None, echo_every: int = 50):
        """
        Initialize the training logger.

        Args:
            log_file_path: NDJSON file to append records to (optional)
            echo_every: Print an iteration line every this many iterations
        """
        self.log_file_path = log_file_path
        self.echo_every = echo_every
        self.records: List[Dict[str, Any]] = []
        self._file = None
        self._events = None
        if log_file_path:
            os.makedirs(os.path.dirname(os.path.abspath(log_file_path)), exist_ok=True)
            self._file = open(log_file_path, "a", encoding="utf-8")
            self._events = structlog.wrap_logger(
                structlog.WriteLogger(self._file),
                processors=[
                    structlog.processors.TimeStamper(fmt="iso", key="logged_at"),
                    structlog.processors.JSONRenderer(sort_keys=True),
                ],
            )

    def _record(self, kind: str, **fields: Any) -> Dict[str, Any]:
        entry = {"kind": kind, **{key: _plain(value) for key, value in fields.items()}}
        self.records.append(entry)
        if self._events is not None:
            self._events.info(kind, **{key: value for key, value in entry.items() if key != "kind"})
        return entry

    def log_iteration(self, iteration: int, loss: float, mean_state_cost: float, violation_fraction: float,
                      k: float, learning_rate: float, grad_norm: float) -> Dict[str, Any]:
        """
        Log one completed training iteration.

        Returns:
            Logged record
        """
        entry = self._record("iteration", iteration=iteration, loss=loss, mean_state_cost=mean_state_cost,
                             violation_fraction=violation_fraction, k=k, learning_rate=learning_rate,
                             grad_norm=grad_norm)
        if self.echo_every and iteration % self.echo_every == 0:
            print(f"📈 it {iteration:5d}  loss {loss:.5g}  cost {mean_state_cost:.5g}  "
                  f"viol {violation_fraction:.4f}  k {k:.3f}")
        return entry

    def log_k_update(self, iteration: int, sigma: float, beta: float, old_k: float, new_k: float) -> Dict[str, Any]:
        print(f"🔧 Steepness update at iteration {iteration}: k {old_k:.3f} -> {new_k:.3f} "
              f"(sigma_c {sigma:.4g} vs beta {beta:.4g})")
        return self._record("k_update", iteration=iteration, sigma=sigma, beta=beta, old_k=old_k, new_k=new_k)

    def log_divergence(self, iteration: int, reason: str, step: Optional[int] = None,
                       batch_index: Optional[int] = None, restored_iteration: Optional[int] = None) -> Dict[str, Any]:
        print(f"⚠️  Divergence at iteration {iteration}: {reason}")
        return self._record("divergence", iteration=iteration, reason=reason, step=step, batch_index=batch_index,
                            restored_iteration=restored_iteration)

    def log_checkpoint(self, iteration: int, path: str) -> Dict[str, Any]:
        return self._record("checkpoint", iteration=iteration, path=path)

    def log_lr_change(self, iteration: int, old_rate: Optional[float], new_rate: float) -> Dict[str, Any]:
        return self._record("lr_change", iteration=iteration, old_rate=old_rate, new_rate=new_rate)

    def iterations(self) -> pd.DataFrame:
        return pd.DataFrame([r for r in self.records if r["kind"] == "iteration"])

    def get_training_summary(self) -> Dict[str, Any]:
        """
        Get summary statistics of the logged run.

        Returns:
            Summary statistics
        """
        df = self.iterations()
        if df.empty:
            return {"iterations": 0, "divergences": self.count("divergence")}

        tenth = max(1, len(df) // 10)
        return {
            "iterations": int(len(df)),
            "final_loss": float(df["loss"].iloc[-1]),
            "first_tenth_mean_loss": float(df["loss"].iloc[:tenth].mean()),
            "last_tenth_mean_loss": float(df["loss"].iloc[-tenth:].mean()),
            "final_k": float(df["k"].iloc[-1]),
            "final_violation_fraction": float(df["violation_fraction"].iloc[-1]),
            "k_updates": self.count("k_update"),
            "divergences": self.count("divergence"),
        }

    def count(self, kind: str) -> int:
        return sum(1 for r in self.records if r["kind"] == kind)

    def print_summary(self):
        """Print training summary statistics."""
        summary = self.get_training_summary()

        print(f"\n📊 Training Summary:")
        print(f"   Iterations: {summary['iterations']}")
        print(f"   Divergence events: {summary['divergences']}")
        if summary["iterations"]:
            print(f"   Final loss: {summary['final_loss']:.6g}")
            print(f"   Mean loss first/last 10%: {summary['first_tenth_mean_loss']:.6g} / "
                  f"{summary['last_tenth_mean_loss']:.6g}")
            print(f"   Final k: {summary['final_k']:.4f} after {summary['k_updates']} updates")
            print(f"   Final violation fraction: {summary['final_violation_fraction']:.4f}")

    def save_to_csv(self, output_file: str) -> Optional[str]:
        """Save the iteration records as CSV; nothing is written when there are none."""
        df = self.iterations()
        if df.empty:
            print("⚠️  No iterations to save")
            return None
        tmp_path = output_file + ".tmp"
        df.to_csv(tmp_path, index=False)
        os.replace(tmp_path, output_file)
        return output_file

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None
            self._events = None


def read_training_log(path: str) -> pd.DataFrame:
    """Load an NDJSON training log."""
    return pd.read_json(path, lines=True)
