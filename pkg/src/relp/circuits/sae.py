"""Sparse autoencoders over site activations."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..model.checkpoint import CheckpointError, read_tensors, write_tensors
from ..model.train import Adam, TrainingDivergedError

_PARAMS = ("W_enc", "b_enc", "W_dec", "b_dec")


class SparseAutoencoder(TransformerMixin, BaseEstimator):
    """ReLU dictionary ``x ≈ relu((x - b_dec) W_enc + b_enc) W_dec + b_dec``.

    Trained with Adam on mean squared reconstruction error plus
    ``l1_coeff`` times the mean per-sample L1 norm of the features.
    Decoder rows are renormalized to unit length after every step.
    """

    def __init__(self, d_feat=64, l1_coeff=1e-3, steps=2000, lr=1e-3, batch_size=128, seed=0, site=None):
        self.d_feat = d_feat
        self.l1_coeff = l1_coeff
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.site = site

    @classmethod
    def identity(cls, d: int, site=None, signed: bool = False) -> "SparseAutoencoder":
        """Neuron dictionary: one feature per hidden dimension.

        With ``signed=True`` each dimension gets a positive and a negative
        feature so that signed activations reconstruct exactly.
        """
        eye = np.eye(d)
        enc = np.hstack([eye, -eye]) if signed else eye
        sae = cls(d_feat=enc.shape[1], l1_coeff=0.0, steps=0, site=site)
        sae._set(enc, np.zeros(enc.shape[1]), enc.T.copy(), np.zeros(d))
        return sae

    def _set(self, W_enc, b_enc, W_dec, b_dec):
        self.W_enc_, self.b_enc_, self.W_dec_, self.b_dec_ = W_enc, b_enc, W_dec, b_dec
        self.n_features_in_ = W_enc.shape[0]

    @property
    def params_(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k + "_") for k in _PARAMS}

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        rng = np.random.default_rng(self.seed)
        W_dec = rng.normal(size=(self.d_feat, d))
        W_dec /= np.linalg.norm(W_dec, axis=1, keepdims=True)
        p = {"W_enc": W_dec.T.copy(), "b_enc": np.zeros(self.d_feat), "W_dec": W_dec, "b_dec": X.mean(axis=0)}
        opt = Adam(lr=self.lr)
        self.loss_curve_ = []
        for step in range(self.steps):
            batch = X[rng.choice(n, size=min(self.batch_size, n), replace=False)]
            loss, grads = _loss_and_grads(p, batch, self.l1_coeff)
            if not np.isfinite(loss):
                self._set(*(p[k] for k in _PARAMS))
                raise TrainingDivergedError(step, self)
            self.loss_curve_.append(loss)
            p = opt.step(p, grads)
            p["W_dec"] = p["W_dec"] / np.maximum(np.linalg.norm(p["W_dec"], axis=1, keepdims=True), 1e-12)
        self._set(*(p[k] for k in _PARAMS))
        F = self.transform(X)
        self.recon_loss_ = float(np.mean((self.inverse_transform(F) - X) ** 2))
        self.mean_active_ = float(np.mean(np.sum(F > 0, axis=1)))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "W_enc_")
        X = np.asarray(X, dtype=np.float64)
        return np.maximum((X - self.b_dec_) @ self.W_enc_ + self.b_enc_, 0.0)

    def inverse_transform(self, F) -> np.ndarray:
        check_is_fitted(self, "W_dec_")
        return np.asarray(F, dtype=np.float64) @ self.W_dec_ + self.b_dec_

    def error(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X - self.inverse_transform(self.transform(X))

    def relative_error(self, X) -> float:
        X = np.asarray(X, dtype=np.float64)
        return float(np.linalg.norm(self.error(X)) / np.linalg.norm(X))


def _loss_and_grads(p, X, l1):
    n, d = X.shape
    xc = X - p["b_dec"]
    pre = xc @ p["W_enc"] + p["b_enc"]
    f = np.maximum(pre, 0.0)
    r = f @ p["W_dec"] + p["b_dec"] - X
    loss = float(np.sum(r * r) / (n * d) + l1 * np.sum(f) / n)
    g = 2.0 * r / (n * d)
    dpre = (g @ p["W_dec"].T + l1 / n) * (pre > 0)
    grads = {
        "W_dec": f.T @ g,
        "W_enc": xc.T @ dpre,
        "b_enc": dpre.sum(axis=0),
        "b_dec": g.sum(axis=0) - (dpre @ p["W_enc"].T).sum(axis=0),
    }
    return loss, grads


def save_sae(sae: SparseAutoencoder, path) -> None:
    check_is_fitted(sae, "W_enc_")
    meta = {"kind": "sae", "sae": True, "site": list(sae.site) if sae.site else None, "params": sae.get_params()}
    meta["params"]["site"] = meta["site"]
    write_tensors(path, sae.params_, meta)


def load_sae(path) -> SparseAutoencoder:
    tensors, meta = read_tensors(path)
    if not meta.get("sae"):
        raise CheckpointError("not an SAE checkpoint")
    if list(tensors) != list(_PARAMS):
        raise CheckpointError("SAE checkpoint must hold W_enc, b_enc, W_dec, b_dec")
    params = dict(meta.get("params", {}))
    if params.get("site") is not None:
        params["site"] = tuple(params["site"])
    sae = SparseAutoencoder(**params)
    d_in, d_feat = tensors["W_enc"].shape
    if tensors["W_dec"].shape != (d_feat, d_in) or tensors["b_enc"].shape != (d_feat,) or tensors["b_dec"].shape != (d_in,):
        raise CheckpointError("inconsistent SAE tensor shapes")
    sae._set(*(tensors[k] for k in _PARAMS))
    return sae
