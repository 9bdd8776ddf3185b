"""Per-sample losses on logits and their derivatives with respect to the logits."""

import numpy as np

from .errors import ConfigurationError

LOSSES = ("logit", "cross_entropy")


def _check_labels(logits, labels):
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ConfigurationError(
            f"logits {logits.shape} and labels {labels.shape} do not align"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ConfigurationError("labels outside [0, k)")
    return logits, labels


def logit_loss(logits, labels):
    """Negated true-class logit, ``J = -z[t]``, one value per sample.

    Unlike cross-entropy it does not saturate once the sample is already
    misclassified, so its gradient keeps pushing the true logit down.

    >>> logit_loss(np.array([[2.0, 5.0, 1.0]]), [1])
    array([-5.])
    """
    logits, labels = _check_labels(logits, labels)
    return -logits[np.arange(len(labels)), labels]


def log_softmax(logits):
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits, labels):
    """``H(y, softmax(z))`` for one-hot ``y``, one value per sample."""
    logits, labels = _check_labels(logits, labels)
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def per_sample_loss(logits, labels, loss="logit"):
    if loss == "logit":
        return logit_loss(logits, labels)
    if loss == "cross_entropy":
        return cross_entropy_loss(logits, labels)
    raise ConfigurationError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def loss_logit_gradient(logits, labels, loss="logit"):
    """dJ/dz for each sample's own loss, shape ``N x k``."""
    logits, labels = _check_labels(logits, labels)
    onehot = np.zeros_like(logits, dtype=np.result_type(logits, np.float32))
    onehot[np.arange(len(labels)), labels] = 1.0
    if loss == "logit":
        return -onehot
    if loss == "cross_entropy":
        return np.exp(log_softmax(logits)) - onehot
    raise ConfigurationError(f"unknown loss {loss!r}; expected one of {LOSSES}")
