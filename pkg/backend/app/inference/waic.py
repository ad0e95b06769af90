"""Widely applicable information criterion and model ranking"""
from typing import Dict
import numpy as np
import pandas as pd
from scipy.special import logsumexp
from backend.app.models import WaicReport
from backend.app.utils.logger import logger

# Pointwise posterior variance above which WAIC is considered unreliable
VARIANCE_WARNING = 0.4


def waic(loglik: np.ndarray) -> WaicReport:
    """
    WAIC on the deviance scale from a (draws, observations) log-likelihood matrix
    Returns:
        WaicReport with waic = -2 (lppd - p_waic) and SE = sqrt(N var(waic_i))
    """
    loglik = np.asarray(loglik, dtype=float)
    if loglik.ndim != 2 or loglik.shape[0] == 0:
        raise ValueError(f"expected a non-empty (draws, observations) matrix, got shape {loglik.shape}")

    lppd_i = logsumexp(loglik, axis=0, b=1.0 / loglik.shape[0])
    vars_lpd = np.var(loglik, axis=0)
    warn = bool(np.any(vars_lpd > VARIANCE_WARNING))
    if warn:
        logger.warning(f"{int(np.sum(vars_lpd > VARIANCE_WARNING))} observations have posterior "
                       f"log-likelihood variance above {VARIANCE_WARNING}; WAIC may be unreliable")

    elpd_i = lppd_i - vars_lpd
    waic_i = -2.0 * elpd_i
    return WaicReport(
        waic=float(np.sum(waic_i)),
        lppd=float(np.sum(lppd_i)),
        p_waic=float(np.sum(vars_lpd)),
        se=float(np.sqrt(waic_i.size * np.var(waic_i))),
        n_obs=int(waic_i.size),
        variance_warning=warn,
        pointwise_elpd=elpd_i.tolist(),
    )


def compare_waic(reports: Dict[str, WaicReport]) -> pd.DataFrame:
    """Ranked table: best (lowest) WAIC first, with WAIC relative to the best"""
    frame = pd.DataFrame([
        {"model": name, "waic": r.waic, "p_waic": r.p_waic, "waic_se": r.se, "warning": r.variance_warning}
        for name, r in reports.items()
    ])
    frame = frame.sort_values("waic", kind="stable").reset_index(drop=True)
    frame.insert(2, "relative_waic", frame["waic"] - frame["waic"].iloc[0])
    return frame
