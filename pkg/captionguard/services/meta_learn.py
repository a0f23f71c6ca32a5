import logging
import time
import warnings
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression, lasso_path as sklearn_lasso_path
from sklearn.preprocessing import StandardScaler

from captionguard.core.errors import (
    DegenerateDataError, DimensionMismatchError, EmptyInputError, InputError,
)
from captionguard.core.io import write_json
from captionguard.schemas.model import (
    BaselineParams, ClassifierConfig, FeatureRank, GBoostConfig, GBoostParams, LassoPath,
    LogisticConfig, LogisticParams, MetaModel, ModelKind, Standardizer, TreeParams,
)
from captionguard.services.feature_bank import FeatureDataset, pseudo_feature

logger = logging.getLogger(__name__)

CONSTANT_STD = 1e-12
PROBABILITY_CLIP = 1e-12
BASELINE_COLUMNS = ("L", "E")

LASSO_GRID_POINTS = 100
LASSO_GRID_RATIO = 1e-4
LASSO_TOL = 1e-12
LASSO_MAX_ITER = 1_000_000


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

def fit_standardizer(X: np.ndarray) -> Standardizer:
    """Per-column mean and population std of the training rows"""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyInputError("cannot fit a standardizer on an empty dataset")
    if X.shape[0] < 2:
        raise EmptyInputError("standardization needs at least 2 rows")
    scaler = StandardScaler().fit(X)
    std = np.sqrt(scaler.var_)
    return Standardizer(
        mean=[float(v) for v in scaler.mean_],
        std=[float(v) for v in std],
        constant=[bool(s < CONSTANT_STD) for s in std],
    )


def apply_standardizer(standardizer: Standardizer, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != standardizer.num_columns:
        raise DimensionMismatchError(
            f"rows have {X.shape[1]} columns, standardizer expects {standardizer.num_columns}"
        )
    constant = np.asarray(standardizer.constant)
    std = np.where(constant, 1.0, np.asarray(standardizer.std))
    Z = (X - np.asarray(standardizer.mean)) / std
    Z[:, constant] = 0.0
    return Z


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------

def _sigmoid(raw: np.ndarray) -> np.ndarray:
    out = np.empty_like(raw, dtype=np.float64)
    positive = raw >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-raw[positive]))
    e = np.exp(raw[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def logistic_objective(
    weights: np.ndarray, intercept: float, Z: np.ndarray, y: np.ndarray, C: float = 1.0
) -> Tuple[float, np.ndarray, float]:
    """L2-penalized negative log-likelihood and its gradient (weights, intercept)

    Matches the objective the saga solver minimizes: 0.5*|w|^2 + C * sum(logloss).
    """
    weights = np.asarray(weights, dtype=np.float64)
    raw = Z @ weights + intercept
    # log(1 + e^raw) - y*raw, evaluated without overflow
    nll = np.sum(np.logaddexp(0.0, raw) - y * raw)
    residual = _sigmoid(raw) - y
    loss = 0.5 * float(weights @ weights) + C * float(nll)
    grad_w = weights + C * (Z.T @ residual)
    grad_b = C * float(residual.sum())
    return loss, grad_w, grad_b


def _require_both_classes(y: np.ndarray) -> None:
    if len(y) == 0:
        raise EmptyInputError("cannot train on an empty dataset")
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateDataError(f"training data has a single class ({int(classes[0])})")


def _fit_logistic_params(Z: np.ndarray, y: np.ndarray, config: LogisticConfig) -> LogisticParams:
    clf = LogisticRegression(
        C=config.C,
        solver=config.solver,
        max_iter=config.max_iter,
        tol=config.tol,
        random_state=config.random_state,
        class_weight=config.class_weight,
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        clf.fit(Z, y)
    if any(issubclass(w.category, ConvergenceWarning) for w in caught):
        logger.warning(f"Logistic solver stopped at max_iter={config.max_iter} before reaching tol={config.tol}")
    params = LogisticParams(
        weights=[float(w) for w in clf.coef_[0]],
        intercept=float(clf.intercept_[0]),
        n_iter=int(clf.n_iter_[0]),
    )
    loss, _, _ = logistic_objective(np.asarray(params.weights), params.intercept, Z, y, config.C)
    logger.debug(f"Logistic fit: {params.n_iter} epochs, objective {loss:.6f}")
    return params


# ---------------------------------------------------------------------------
# Gradient boosting
# ---------------------------------------------------------------------------

def _export_tree(regressor) -> TreeParams:
    tree = regressor.tree_
    return TreeParams(
        feature=[int(f) for f in tree.feature],
        threshold=[float(t) for t in tree.threshold],
        left=[int(c) for c in tree.children_left],
        right=[int(c) for c in tree.children_right],
        value=[float(v) for v in tree.value[:, 0, 0]],
    )


def _tree_predict(tree: TreeParams, Z: np.ndarray) -> np.ndarray:
    feature = np.asarray(tree.feature, dtype=np.int64)
    threshold = np.asarray(tree.threshold, dtype=np.float64)
    left = np.asarray(tree.left, dtype=np.int64)
    right = np.asarray(tree.right, dtype=np.int64)
    node = np.zeros(Z.shape[0], dtype=np.int64)
    while True:
        active = np.nonzero(left[node] != -1)[0]
        if active.size == 0:
            break
        current = node[active]
        go_left = Z[active, feature[current]] <= threshold[current]
        node[active] = np.where(go_left, left[current], right[current])
    return np.asarray(tree.value, dtype=np.float64)[node]


def _tree_inputs(Z: np.ndarray) -> np.ndarray:
    # Trees were grown on single-precision inputs; compare on the same grid.
    return Z.astype(np.float32).astype(np.float64)


def _prior_log_odds(y: np.ndarray) -> float:
    p = float(np.mean(y))
    return float(np.log(p / (1.0 - p)))


def _fit_gboost_params(Z: np.ndarray, y: np.ndarray, config: GBoostConfig) -> GBoostParams:
    if config.n_estimators == 0:
        return GBoostParams(learning_rate=config.learning_rate, init_raw=_prior_log_odds(y), trees=[])
    clf = GradientBoostingClassifier(
        loss="log_loss",
        n_estimators=config.n_estimators,
        max_depth=config.max_depth,
        learning_rate=config.learning_rate,
        subsample=config.subsample,
        random_state=config.random_state,
    )
    clf.fit(Z, y)
    params = GBoostParams(
        learning_rate=config.learning_rate,
        init_raw=_prior_log_odds(y),
        trees=[_export_tree(clf.estimators_[i, 0]) for i in range(clf.n_estimators_)],
    )
    logger.debug(f"Gradient boosting fit: {len(params.trees)} trees, train loss {clf.train_score_[-1]:.6f}")
    return params


def _gboost_raw(params: GBoostParams, Z: np.ndarray) -> np.ndarray:
    Zt = _tree_inputs(Z)
    raw = np.full(Z.shape[0], params.init_raw, dtype=np.float64)
    for tree in params.trees:
        raw += params.learning_rate * _tree_predict(tree, Zt)
    return raw


def staged_training_loss(model: MetaModel, X: np.ndarray, y: np.ndarray) -> List[float]:
    """Mean logistic loss after the prior and after each boosting stage"""
    params = model.parameters.inner if isinstance(model.parameters, BaselineParams) else model.parameters
    if not isinstance(params, GBoostParams):
        raise InputError("staged loss is only defined for gradient boosting models")
    Z = _tree_inputs(_standardized(model, X))
    y = np.asarray(y, dtype=np.float64)
    raw = np.full(Z.shape[0], params.init_raw, dtype=np.float64)
    losses = [float(np.mean(np.logaddexp(0.0, raw) - y * raw))]
    for tree in params.trees:
        raw = raw + params.learning_rate * _tree_predict(tree, Z)
        losses.append(float(np.mean(np.logaddexp(0.0, raw) - y * raw)))
    return losses


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------

def _model_notes(config: ClassifierConfig) -> List[str]:
    if config.kind == "logistic":
        return [
            f"L2 strength C={config.logistic.C} in standardized space (library default)",
            "no class weights; imbalance handled by threshold selection",
        ]
    return ["exact greedy splits on all rows, no subsampling"]


def _fit_inner(Z: np.ndarray, y: np.ndarray, config: ClassifierConfig):
    if config.kind == "logistic":
        return _fit_logistic_params(Z, y, config.logistic)
    return _fit_gboost_params(Z, y, config.gboost)


def fit_meta_model(
    X: np.ndarray, y: np.ndarray, columns: Sequence[str], config: ClassifierConfig, digest: str
) -> MetaModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[1] != len(columns):
        raise DimensionMismatchError(f"rows have {X.shape[1]} columns but {len(columns)} names were given")
    _require_both_classes(y)
    started = time.perf_counter()
    standardizer = fit_standardizer(X)
    params = _fit_inner(apply_standardizer(standardizer, X), y, config)
    logger.info(
        f"Trained {config.kind} model on {X.shape[0]} rows x {X.shape[1]} columns "
        f"in {time.perf_counter() - started:.2f}s"
    )
    return MetaModel(
        kind=ModelKind(config.kind),
        columns=list(columns),
        standardizer=standardizer,
        parameters=params,
        threshold=config.threshold,
        config=config,
        config_digest=digest,
        notes=_model_notes(config),
    )


def train_logistic(
    X: np.ndarray, y: np.ndarray, columns: Sequence[str],
    config: Optional[ClassifierConfig] = None, digest: str = "",
) -> MetaModel:
    config = (config or ClassifierConfig()).model_copy(update={"kind": "logistic"})
    return fit_meta_model(X, y, columns, config, digest)


def train_gboost(
    X: np.ndarray, y: np.ndarray, columns: Sequence[str],
    config: Optional[ClassifierConfig] = None, digest: str = "",
) -> MetaModel:
    config = (config or ClassifierConfig(kind="gboost")).model_copy(update={"kind": "gboost"})
    return fit_meta_model(X, y, columns, config, digest)


def train_baseline(
    X: np.ndarray, y: np.ndarray, columns: Sequence[str], column: str,
    config: Optional[ClassifierConfig] = None, digest: str = "",
) -> MetaModel:
    """One-dimensional classifier on a single raw column (L or E)"""
    if column not in BASELINE_COLUMNS:
        raise InputError(f"baseline column must be one of {', '.join(BASELINE_COLUMNS)}, got '{column}'")
    if column not in columns:
        raise InputError(f"column '{column}' is not in the dataset")
    config = config or ClassifierConfig()
    index = list(columns).index(column)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[1] != len(columns):
        raise DimensionMismatchError(f"rows have {X.shape[1]} columns but {len(columns)} names were given")
    _require_both_classes(y)
    single = X[:, [index]]
    standardizer = fit_standardizer(single)
    inner = _fit_inner(apply_standardizer(standardizer, single), y, config)
    logger.info(f"Trained {config.kind} baseline on column {column} ({X.shape[0]} rows)")
    return MetaModel(
        kind=ModelKind.SINGLE_FEATURE_BASELINE,
        columns=list(columns),
        standardizer=standardizer,
        parameters=BaselineParams(column=index, column_name=column, inner=inner),
        threshold=config.threshold,
        config=config,
        config_digest=digest,
        notes=_model_notes(config),
    )


def train_model(
    dataset: FeatureDataset, config: ClassifierConfig, digest: str = "", baseline: Optional[str] = None
) -> MetaModel:
    """Train on every row of a labeled dataset; baseline selects a single-column model"""
    if len(dataset) == 0:
        raise EmptyInputError("dataset has no rows")
    if baseline is not None:
        return train_baseline(dataset.X, dataset.y, dataset.columns, baseline, config, digest)
    return fit_meta_model(dataset.X, dataset.y, dataset.columns, config, digest)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _standardized(model: MetaModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.num_columns:
        raise DimensionMismatchError(f"feature vectors have {X.shape[1]} columns, model expects {model.num_columns}")
    if isinstance(model.parameters, BaselineParams):
        X = X[:, [model.parameters.column]]
    return apply_standardizer(model.standardizer, X)


def _raw_score(params, Z: np.ndarray) -> np.ndarray:
    if isinstance(params, BaselineParams):
        return _raw_score(params.inner, Z)
    if isinstance(params, LogisticParams):
        return Z @ np.asarray(params.weights) + params.intercept
    return _gboost_raw(params, Z)


def predict_proba(model: MetaModel, X: np.ndarray) -> np.ndarray:
    """Probability of label 1 (hallucinated) for each row, strictly inside (0, 1)"""
    raw = _raw_score(model.parameters, _standardized(model, X))
    return np.clip(_sigmoid(raw), PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP)


def predict(model: MetaModel, X: np.ndarray, threshold: Optional[float] = None) -> np.ndarray:
    cut = model.threshold if threshold is None else threshold
    return (predict_proba(model, X) >= cut).astype(np.int64)


def save_model(path, model: MetaModel) -> None:
    write_json(path, model)


def load_model(path) -> MetaModel:
    try:
        with open(path, encoding="utf-8") as handle:
            return MetaModel.model_validate_json(handle.read())
    except OSError as e:
        raise InputError(f"cannot read model {path}: {e}") from e
    except ValidationError as e:
        raise InputError(f"invalid model file {path}: {e}") from e


# ---------------------------------------------------------------------------
# LASSO path and feature ranking
# ---------------------------------------------------------------------------

def lasso_grid(lambda_max: float, num: int = LASSO_GRID_POINTS, ratio: float = LASSO_GRID_RATIO) -> np.ndarray:
    return np.logspace(np.log10(lambda_max), np.log10(lambda_max * ratio), num=num)


def lasso_path(
    X: np.ndarray, y: np.ndarray, columns: Sequence[str], alphas: Optional[Sequence[float]] = None
) -> LassoPath:
    """Coordinate-descent LASSO path of the 0/1 label on standardized columns"""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < 2:
        raise EmptyInputError("LASSO needs at least 2 rows")
    if X.shape[1] != len(columns):
        raise DimensionMismatchError(f"rows have {X.shape[1]} columns but {len(columns)} names were given")
    standardizer = fit_standardizer(X)
    if all(standardizer.constant):
        raise DegenerateDataError("every column is constant; the LASSO path is empty")
    Z = np.asfortranarray(apply_standardizer(standardizer, X))
    intercept = float(y.mean())
    yc = y - intercept
    n = X.shape[0]
    lambda_max = float(np.max(np.abs(Z.T @ yc)) / n)
    if lambda_max <= 0.0:
        raise DegenerateDataError("labels are uncorrelated with every column (constant target?)")

    if alphas is None:
        grid = lasso_grid(lambda_max)
    else:
        grid = np.sort(np.asarray(alphas, dtype=np.float64))[::-1]
        if grid.size == 0 or np.any(grid <= 0):
            raise InputError("LASSO penalties must be positive")

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        path_alphas, coefs, _ = sklearn_lasso_path(Z, yc, alphas=grid, tol=LASSO_TOL, max_iter=LASSO_MAX_ITER)
    if caught:
        logger.warning(f"LASSO coordinate descent did not fully converge at {len(caught)} grid points")
    coefs = coefs.T.copy()
    # lambda_max is the smallest penalty with an all-zero solution
    coefs[path_alphas >= lambda_max] = 0.0

    entry: List[Optional[int]] = []
    for j in range(len(columns)):
        nonzero = np.nonzero(coefs[:, j] != 0.0)[0]
        entry.append(int(nonzero[0]) if nonzero.size else None)
    logger.info(f"LASSO path over {len(path_alphas)} penalties; lambda_max={lambda_max:.6g}")
    return LassoPath(
        columns=list(columns),
        alphas=[float(a) for a in path_alphas],
        lambda_max=lambda_max,
        intercept=intercept,
        coefficients=[[float(c) for c in row] for row in coefs],
        entry_index=entry,
    )


def rank_features(path: LassoPath) -> List[FeatureRank]:
    """Order features by LASSO entry; attention heads collapse into 'A'"""
    groups: Dict[str, List[int]] = {}
    for j, column in enumerate(path.columns):
        groups.setdefault(pseudo_feature(column), []).append(j)

    coefficients = np.asarray(path.coefficients)
    selected, unselected = [], []
    for order, (name, members) in enumerate(groups.items()):
        entries = [path.entry_index[j] for j in members if path.entry_index[j] is not None]
        if not entries:
            unselected.append((order, name))
            continue
        first = min(entries)
        strength = float(np.max(np.abs(coefficients[first, members])))
        selected.append((first, -strength, order, name))

    selected.sort()
    ranks = [
        FeatureRank(feature=name, rank=float(i + 1), entry_index=first, selected=True)
        for i, (first, _, _, name) in enumerate(selected)
    ]
    last = float(len(groups))
    ranks.extend(FeatureRank(feature=name, rank=last, entry_index=None, selected=False) for _, name in unselected)
    return ranks


def average_ranks(rankings: Sequence[Sequence[FeatureRank]]) -> List[FeatureRank]:
    """Average each feature's rank over several datasets"""
    if not rankings:
        raise EmptyInputError("no rankings to average")
    names = {r.feature for r in rankings[0]}
    for ranking in rankings[1:]:
        if {r.feature for r in ranking} != names:
            raise InputError("rankings cover different feature sets")
    totals: Dict[str, List[FeatureRank]] = {}
    for ranking in rankings:
        for r in ranking:
            totals.setdefault(r.feature, []).append(r)
    averaged = [
        FeatureRank(
            feature=name,
            rank=float(np.mean([r.rank for r in items])),
            entry_index=min((r.entry_index for r in items if r.entry_index is not None), default=None),
            selected=any(r.selected for r in items),
        )
        for name, items in totals.items()
    ]
    averaged.sort(key=lambda r: (r.rank, r.feature))
    return averaged


def selection_order(path: LassoPath) -> List[List[int]]:
    """Column groups in LASSO entry order, one group per selected pseudo-feature"""
    members: Dict[str, List[int]] = {}
    for j, column in enumerate(path.columns):
        members.setdefault(pseudo_feature(column), []).append(j)
    return [members[r.feature] for r in rank_features(path) if r.selected]
