# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

"""Utility functions shared by the estimators, controllers and entry points."""
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Iterable, Literal, Union

import torch
from lightning.fabric.loggers import CSVLogger, TensorBoardLogger
from lightning_utilities.core.imports import RequirementCache

_TENSORBOARD_AVAILABLE = RequirementCache("tensorboard")

DTYPE = torch.float64


class ConfigurationError(ValueError):
    """Raised for invalid scenario values and inconsistent model dimensions."""


class NumericalError(RuntimeError):
    """Raised when a matrix that must be positive definite is not, or an iteration fails to terminate."""


class ContractError(ValueError):
    """Raised when a caller breaks the precondition of a pure operation."""


def as_tensor(values: Union[torch.Tensor, Iterable[float], float]) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.as_tensor(values, dtype=DTYPE)


def symmetrize(P: torch.Tensor) -> torch.Tensor:
    return 0.5 * (P + P.mT)


def min_eigenvalue(P: torch.Tensor) -> float:
    return torch.linalg.eigvalsh(symmetrize(P)).min().item()


def is_psd(P: torch.Tensor, tol: float = 1e-9) -> bool:
    return torch.allclose(P, P.mT, atol=1e-9, rtol=0.0) and min_eigenvalue(P) >= -tol


def psd_sqrt(P: torch.Tensor) -> torch.Tensor:
    """Symmetric square root S of a PSD matrix, S @ S = P. Works for singular P."""
    eigenvalues, eigenvectors = torch.linalg.eigh(symmetrize(P))
    return eigenvectors @ torch.diag(eigenvalues.clamp(min=0.0).sqrt()) @ eigenvectors.mT


def cholesky(P: torch.Tensor, what: str = "matrix") -> torch.Tensor:
    L, info = torch.linalg.cholesky_ex(symmetrize(P))
    if info.item() != 0:
        raise NumericalError(f"The {what} is not positive definite (Cholesky failed at minor {info.item()}).")
    return L


def spd_solve(S: torch.Tensor, B: torch.Tensor, what: str = "matrix") -> torch.Tensor:
    """Solves ``S X = B`` for a symmetric positive definite ``S`` through its Cholesky factor."""
    return torch.cholesky_solve(B, cholesky(S, what))


def quadratic_form(v: torch.Tensor, S: torch.Tensor, what: str = "matrix") -> float:
    """``vᵀ S⁻¹ v`` for a symmetric positive definite ``S``."""
    return (v @ spd_solve(S, v.unsqueeze(-1), what).squeeze(-1)).item()


def block_diag(*blocks: torch.Tensor) -> torch.Tensor:
    return torch.block_diag(*blocks).to(DTYPE)


def clamp_norm(v: torch.Tensor, bound: float) -> torch.Tensor:
    norm = torch.linalg.vector_norm(v)
    if norm <= bound:
        return v
    return v * (bound / norm)


def format_float(value: float) -> str:
    if math.isnan(value):
        return "nan"
    return f"{value:.6f}"


def atomic_write(path: Path, text: str) -> None:
    """Writes ``text`` next to ``path`` first and renames it into place so that readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fp:
            fp.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def init_out_dir(out_dir: Path) -> Path:
    if not out_dir.is_absolute() and "LIGHTNING_ARTIFACTS_DIR" in os.environ:
        return Path(os.getenv("LIGHTNING_ARTIFACTS_DIR")) / out_dir
    return out_dir


def CLI(*args: Any, **kwargs: Any) -> Any:
    from jsonargparse import CLI, set_config_read_mode, set_docstring_parse_options

    set_docstring_parse_options(attribute_docstrings=True)
    set_config_read_mode(urls_enabled=True)

    kwargs.setdefault("as_positional", False)

    return CLI(*args, **kwargs)


def choose_logger(
    logger_name: Literal["csv", "tensorboard"],
    out_dir: Path,
    name: str,
    log_interval: int = 1,
    **kwargs: Any,
):
    if logger_name == "csv":
        return CSVLogger(root_dir=(out_dir / "logs"), name="csv", flush_logs_every_n_steps=log_interval, **kwargs)
    if logger_name == "tensorboard":
        if not _TENSORBOARD_AVAILABLE:
            raise ModuleNotFoundError(str(_TENSORBOARD_AVAILABLE))
        return TensorBoardLogger(root_dir=(out_dir / "logs"), name="tensorboard", **kwargs)
    raise ValueError(f"`--logger_name={logger_name}` is not a valid option. Choose from 'csv', 'tensorboard'.")


def exit_with(error: BaseException, code: int) -> None:
    print(f"{type(error).__name__}: {error}", file=sys.stderr)
    raise SystemExit(code)
