"""Monte-Carlo comparison of penalty families on simulated designs."""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from Panel_Data.longitudinal_data import standardize
from PGEE.errors import DataError, PgeeError, SpecificationError
from PGEE.parallel import run_parallel
from PGEE.solver import ModelSpec, SolverControl, fit_gee
from PGEE.tuning import DEFAULT_ALPHAS, DEFAULT_N_LAMBDA, RULES, TuningGrid, cv_then_fit
from Simulation.generators import (CrossSectionalConfig, LaggedConfig, oracle_binomial_beta,
                                   simulate_binomial, simulate_cross_sectional, simulate_lagged)
from Simulation.metrics import model_error, selection_metrics

STUDY_FAMILIES = ("gee", "lasso", "ridge", "en", "scad", "scad_l2")
GENERATORS = ("cross_sectional", "lagged")
BINOMIAL_ORACLE_SUBJECTS = 20_000


@dataclass(frozen=True)
class StudyDesign:
    """A simulated design together with the tuning grid the study searches."""
    name: str
    generator: object
    family: str = "gaussian"
    working: str = "independence"
    n_lambda: int = DEFAULT_N_LAMBDA
    alphas: Tuple[float, ...] = DEFAULT_ALPHAS
    rule: str = "min"

    def __post_init__(self):
        if not isinstance(self.generator, (CrossSectionalConfig, LaggedConfig)):
            raise SpecificationError("generator must be a CrossSectionalConfig or a LaggedConfig")
        if self.family not in ("gaussian", "binomial"):
            raise SpecificationError(f"unknown family '{self.family}', expected gaussian or binomial")
        if self.family == "binomial" and not isinstance(self.generator, LaggedConfig):
            raise SpecificationError("binomial designs use the lagged generator")
        if self.rule not in RULES:
            raise SpecificationError(f"unknown rule '{self.rule}', expected min or one_se")
        if self.n_lambda < 1:
            raise SpecificationError("n_lambda must be at least 1")
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))

    def simulate(self, seed):
        if self.family == "binomial":
            return simulate_binomial(self.generator, seed)
        if isinstance(self.generator, LaggedConfig):
            return simulate_lagged(self.generator, seed)
        return simulate_cross_sectional(self.generator, seed)

    def model(self):
        return ModelSpec.for_family(self.family, self.working)

    def to_config(self):
        config = {
            "name": self.name,
            "family": self.family,
            "working": self.working,
            "n_lambda": self.n_lambda,
            "alphas": list(self.alphas),
            "rule": self.rule,
        }
        config.update(self.generator.to_config())
        return config

    @classmethod
    def from_config(cls, config):
        """Builds a design from a JSON object.

        ``"preset"`` names a base design whose fields the other keys override;
        otherwise ``"generator"`` selects cross_sectional or lagged.
        """
        config = dict(config)
        base = None
        if "preset" in config:
            base = preset(config.pop("preset"))
        generator = config.pop("generator", None)
        if generator is None:
            if base is None:
                raise SpecificationError("design config needs a 'preset' or a 'generator'")
            generator = "lagged" if isinstance(base.generator, LaggedConfig) else "cross_sectional"
        if generator not in GENERATORS:
            raise SpecificationError(f"unknown generator '{generator}', expected one of {', '.join(GENERATORS)}")
        design_keys = ("name", "family", "working", "n_lambda", "alphas", "rule")
        design = {k: config.pop(k) for k in design_keys if k in config}
        gen_cls = LaggedConfig if generator == "lagged" else CrossSectionalConfig
        if "scenario" in config and generator == "lagged":
            scenario_base = LaggedConfig.preset(int(config["scenario"]))
            gen_fields = scenario_base.to_config()
        elif base is not None and isinstance(base.generator, gen_cls):
            gen_fields = base.generator.to_config()
        else:
            gen_fields = gen_cls().to_config()
        gen_fields.pop("generator")
        unknown = set(config) - set(gen_fields)
        if unknown:
            raise SpecificationError(f"unknown design key(s): {', '.join(sorted(unknown))}")
        gen_fields.update(config)
        defaults = {} if base is None else {k: getattr(base, k) for k in design_keys}
        defaults.update(design)
        defaults.setdefault("name", "custom")
        try:
            return cls(generator=gen_cls(**gen_fields), **defaults)
        except TypeError as e:
            raise SpecificationError(f"invalid design config: {e}") from e


def _presets():
    presets = {"cross-sectional": StudyDesign("cross-sectional", CrossSectionalConfig())}
    for scenario in (1, 2):
        for n in (20, 100):
            name = f"scenario{scenario}-n{n}"
            presets[name] = StudyDesign(name, LaggedConfig.preset(scenario, n))
        name = f"scenario{scenario}-binomial"
        presets[name] = StudyDesign(name, LaggedConfig.preset(scenario, 100), family="binomial")
    presets["scenario2-n400"] = StudyDesign("scenario2-n400", LaggedConfig.preset(2, 400))
    return presets


PRESETS: Dict[str, StudyDesign] = _presets()


def preset(name):
    if name not in PRESETS:
        raise SpecificationError(f"unknown design '{name}', expected one of {', '.join(PRESETS)}")
    return PRESETS[name]


def load_design(path):
    if not os.path.isfile(path):
        raise DataError(f"design file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as file:
            config = json.load(file)
    except json.JSONDecodeError as e:
        raise DataError(f"could not parse design file '{path}': {e}") from e
    if not isinstance(config, dict):
        raise DataError(f"design file '{path}' must hold a JSON object")
    return StudyDesign.from_config(config)


@dataclass
class ReplicateRecord:
    replicate: int
    family: str
    model_error: Optional[float] = None
    cd_ratio: Optional[float] = None
    id_ratio: Optional[float] = None
    rel_bias: Optional[float] = None
    lambda_: Optional[float] = None
    alpha: Optional[float] = None
    converged: bool = False
    error: str = ""
    coefficients: List[float] = field(default_factory=list)

    @property
    def ok(self):
        return self.model_error is not None

    def to_dict(self):
        return {
            "replicate": self.replicate,
            "family": self.family,
            "model_error": self.model_error,
            "cd_ratio": self.cd_ratio,
            "id_ratio": self.id_ratio,
            "rel_bias": self.rel_bias,
            "lambda": self.lambda_,
            "alpha": self.alpha,
            "converged": self.converged,
            "error": self.error,
            "coefficients": self.coefficients,
        }


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _median(values):
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


@dataclass
class SimReport:
    design: StudyDesign
    families: Tuple[str, ...]
    replicates: int
    seed: Optional[int]
    true_beta: np.ndarray
    records: List[ReplicateRecord]

    def family_records(self, family):
        return [r for r in self.records if r.family == family]

    def summary(self, family):
        """Aggregate scores of one family over the replicates that succeeded."""
        ok = [r for r in self.family_records(family) if r.ok]
        me = [r.model_error for r in ok]
        return {
            "family": family,
            "me_mean": _mean(me),
            "me_se": float(np.std(me, ddof=1) / np.sqrt(len(me))) if len(me) >= 2 else None,
            "me_median": _median(me),
            "lambda_median": _median([r.lambda_ for r in ok]),
            "alpha_median": _median([r.alpha for r in ok]),
            "cd_ratio": _mean([r.cd_ratio for r in ok]),
            "id_ratio": _mean([r.id_ratio for r in ok]),
            "rel_bias": _mean([r.rel_bias for r in ok]),
            "n_ok": len(ok),
            "incomplete": len(ok) < self.replicates,
        }

    def to_rows(self):
        return [self.summary(f) for f in self.families]

    def to_dict(self):
        return {
            "design": self.design.to_config(),
            "families": list(self.families),
            "replicates": self.replicates,
            "seed": self.seed,
            "true_beta": self.true_beta.tolist(),
            "summary": self.to_rows(),
            "records": [r.to_dict() for r in self.records],
        }


def study_truth(design, seed_sequence):
    if design.family == "binomial":
        return oracle_binomial_beta(design.generator, BINOMIAL_ORACLE_SUBJECTS, seed_sequence)
    return design.generator.true_beta


def _score(record, beta_hat, beta_true, second_moment):
    record.coefficients = [float(b) for b in beta_hat]
    record.model_error = model_error(beta_hat, beta_true, second_moment)
    record.cd_ratio, record.id_ratio = selection_metrics(beta_hat, beta_true)
    if beta_true[0] != 0:
        record.rel_bias = float((beta_hat[0] - beta_true[0]) / beta_true[0])


def run_replicate(design, families, replicate, seed_sequence, beta_true, control=None):
    """Simulates, standardizes, tunes and scores every family on one dataset."""
    control = (SolverControl() if control is None else control).quiet()
    model = design.model()
    raw = design.simulate(seed_sequence)
    data, info = standardize(raw, scale_response=design.family == "gaussian")
    second_moment = design.generator.covariance
    grid = None
    records = []
    for family in families:
        record = ReplicateRecord(replicate, family)
        try:
            if family == "gee":
                fit = fit_gee(data, model, control)
            else:
                if grid is None:
                    grid = TuningGrid.default(data, model, "en", design.n_lambda, design.alphas)
                _, spec, fit = cv_then_fit(data, model, family, grid, design.rule, control)
                record.lambda_ = spec.lambda1 + spec.lambda2
                record.alpha = spec.lambda1 / record.lambda_ if record.lambda_ > 0 else None
            record.converged = fit.converged
            _score(record, info.to_original(fit.beta_nonnaive), beta_true, second_moment)
        except PgeeError as e:
            record.error = str(e)
            logging.warning("replicate %d, %s: %s", replicate, family, e)
        records.append(record)
    logging.info("replicate %d of design %s done", replicate, design.name)
    return records


def run_study(design, penalties=STUDY_FAMILIES, replicates=100, control=None, seed=None, threads=1):
    """Runs ``replicates`` independent simulate/tune/score rounds.

    Replicate r draws from the r-th child of ``SeedSequence(seed)``, so the
    report does not depend on ``threads``.

    Returns:
        SimReport: Per-replicate records and per-family aggregates.
    """
    penalties = tuple(penalties)
    unknown = [f for f in penalties if f not in STUDY_FAMILIES]
    if unknown:
        raise SpecificationError(f"unknown study family: {', '.join(unknown)}; expected {', '.join(STUDY_FAMILIES)}")
    if replicates < 1:
        raise SpecificationError("replicates must be at least 1")
    oracle_seq, *replicate_seqs = np.random.SeedSequence(seed).spawn(replicates + 1)
    beta_true = np.asarray(study_truth(design, oracle_seq), dtype=float)

    def one(r):
        return run_replicate(design, penalties, r, replicate_seqs[r], beta_true, control)

    per_replicate = run_parallel(one, range(replicates), threads)
    records = [rec for batch in per_replicate for rec in batch]
    return SimReport(design, penalties, replicates, seed, beta_true, records)
