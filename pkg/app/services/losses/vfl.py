# app/services/losses/vfl.py
from __future__ import annotations

import numpy as np

from services.nn.tensor import ContractError, DimensionError, Tensor

LOG_CLAMP = 1e-9


def varifocal_loss(p: Tensor, q: np.ndarray, alpha_vfl: float = 0.75, gamma_vfl: float = 2.0) -> Tensor:
    """
    逐元素求和：
    - q > 0: -q * (q*log p + (1-q)*log(1-p))
    - q = 0: -alpha * p^gamma * log(1-p)
    log 的自变量截断到 1e-9，被截断处该项梯度为 0。
    """
    qa = np.asarray(q, dtype=p.data.dtype)
    if qa.shape != p.shape:
        raise DimensionError("varifocal_loss", "targets", p.shape, qa.shape)
    if np.any(qa < 0) or np.any(qa > 1):
        raise ContractError("varifocal targets must lie in [0, 1]")
    pd = p.data
    if np.any(pd < 0) or np.any(pd > 1):
        raise ContractError("varifocal predictions must lie in [0, 1]")

    lp = np.log(np.maximum(pd, LOG_CLAMP))
    l1p = np.log(np.maximum(1.0 - pd, LOG_CLAMP))
    dlp = np.where(pd > LOG_CLAMP, 1.0 / np.maximum(pd, LOG_CLAMP), 0.0)
    dl1p = np.where(1.0 - pd > LOG_CLAMP, -1.0 / np.maximum(1.0 - pd, LOG_CLAMP), 0.0)

    pos = qa > 0
    p_gamma = np.power(pd, gamma_vfl)
    d_p_gamma = np.where(pd > 0, gamma_vfl * np.power(np.maximum(pd, LOG_CLAMP), gamma_vfl - 1.0), 0.0)

    per = np.where(pos, -qa * (qa * lp + (1.0 - qa) * l1p), -alpha_vfl * p_gamma * l1p)
    loss = np.asarray(per.sum(dtype=np.float64))

    def backward(g: np.ndarray):
        dpos = -qa * (qa * dlp + (1.0 - qa) * dl1p)
        dneg = -alpha_vfl * (d_p_gamma * l1p + p_gamma * dl1p)
        return (g * np.where(pos, dpos, dneg),)

    return Tensor.from_op(loss, (p,), backward, "varifocal_loss")
