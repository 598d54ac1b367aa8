"""Evaluation: per-domain and macro-average accuracy, plus cosine-gap
diagnostics that quantify how well domain features separate domains and how
well category features align classes across domains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tape, Tensor
from .data import Corpus, DataError
from .model import ModelParams, forward

_EVAL_BATCH = 256
_ALIGNMENT_CAP = 4000


@dataclass
class Metrics:
    per_domain_accuracy: dict
    average_accuracy: float
    n_per_domain: dict


@dataclass
class AlignmentReport:
    domain_within: float
    domain_between: float
    domain_separation: float
    class_within: float
    class_between: float
    category_alignment: float


def _eval_features(model: ModelParams, corpus: Corpus):
    """Eval-mode f_d, f_c, and predictions for the whole corpus."""
    if len(corpus) == 0:
        raise DataError("cannot evaluate an empty corpus")
    if corpus.feature_dim != model.f_d.spec.input_dim:
        raise ShapeError(f"corpus feature dim {corpus.feature_dim} does not match "
                         f"model input dim {model.f_d.spec.input_dim}")
    f_d_rows, f_c_rows, preds = [], [], []
    domains = np.empty(len(corpus), dtype=np.int64)
    labels = np.empty(len(corpus), dtype=np.int64)
    idx = list(range(len(corpus)))
    for start in range(0, len(idx), _EVAL_BATCH):
        chunk = idx[start:start + _EVAL_BATCH]
        x, doms, labs = corpus.densify(chunk)
        out = forward(Tape(), model, Tensor(x), "eval")
        f_d_rows.append(out.f_d.data)
        f_c_rows.append(out.f_c.data)
        preds.append(np.argmax(out.logits.data, axis=1))
        domains[start:start + len(chunk)] = doms
        labels[start:start + len(chunk)] = labs
    return (np.vstack(f_d_rows), np.vstack(f_c_rows),
            np.concatenate(preds), domains, labels)


def evaluate(model: ModelParams, corpus: Corpus) -> Metrics:
    """Eval-mode accuracy per domain; argmax ties break to the lowest class."""
    _, _, preds, domains, labels = _eval_features(model, corpus)
    per_domain, counts = {}, {}
    for d in sorted(set(domains.tolist())):
        sel = domains == d
        counts[d] = int(sel.sum())
        per_domain[d] = float(np.mean(preds[sel] == labels[sel]))
    avg = float(np.mean([per_domain[d] for d in per_domain]))
    return Metrics(per_domain_accuracy=per_domain, average_accuracy=avg,
                   n_per_domain=counts)


def _cosine_matrix(features: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(features * features, axis=1, keepdims=True))
    normed = np.where(norms >= 1e-12, features / np.maximum(norms, 1e-12), 0.0)
    return normed @ normed.T


def _pair_gap(features: np.ndarray, groups: np.ndarray):
    sims = _cosine_matrix(features)
    n = len(groups)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    same = groups[:, None] == groups[None, :]
    within = float(sims[upper & same].mean())
    between = float(sims[upper & ~same].mean())
    return within, between, within - between


def alignment_report(model: ModelParams, corpus: Corpus) -> AlignmentReport:
    """Cosine gaps (within minus between) for domains on f_d and classes on f_c.

    Class pairs are pooled across domains, so cross-domain same-class pairs
    count as within. Corpora larger than a few thousand rows are thinned
    deterministically before the pairwise computation.
    """
    present_domains = {inst.domain_id for inst in corpus.instances}
    present_classes = {inst.label for inst in corpus.instances}
    if len(present_domains) < 2 or len(present_classes) < 2:
        raise DataError("alignment diagnostics need at least 2 domains and 2 classes")

    f_d, f_c, _, domains, labels = _eval_features(model, corpus)
    if len(corpus) > _ALIGNMENT_CAP:
        stride = int(np.ceil(len(corpus) / _ALIGNMENT_CAP))
        keep = np.arange(0, len(corpus), stride)
        f_d, f_c, domains, labels = f_d[keep], f_c[keep], domains[keep], labels[keep]

    d_within, d_between, d_gap = _pair_gap(f_d, domains)
    c_within, c_between, c_gap = _pair_gap(f_c, labels)
    return AlignmentReport(domain_within=d_within, domain_between=d_between,
                           domain_separation=d_gap, class_within=c_within,
                           class_between=c_between, category_alignment=c_gap)
