"""Flat run configuration: every tunable in one type-checked document."""

from dataclasses import asdict, dataclass, fields

from .bilevel import CGConfig, OuterConfig
from .errors import ConfigError, InvalidInputError
from .forget import KINDS, ForgetLoss, InnerConfig
from .io import config_hash, read_json
from .selector import U2AConfig

# external key -> attribute name, where they differ
_RENAMED = {"lambda": "lam"}
_CHOICES = {"forget_loss": KINDS, "gain_sign": ("min", "max")}


@dataclass(frozen=True)
class RunConfig:
    lam: float = 1.0
    beta: float = 0.5
    delta: float = 0.01
    T: int = 100
    inner_steps: int = 5000
    inner_lr: float = 0.1
    inner_tol: float = 1e-8
    outer_lr: float = 3e-2
    outer_steps: int = 300
    cg_tol: float = 1e-8
    cg_max_iters: int = 200
    forget_loss: str = "ga"
    npo_beta: float = 0.1
    retain_weight: float = 1.0
    gain_sign: str = "min"
    k_percent: float = 20.0
    seed: int = 0
    train_steps: int = 3000
    train_lr: float = 1.0
    reward_steps: int = 2000
    reward_lr: float = 1.0
    reward_l2: float = 1e-3
    impact_omega: float = 0.01
    group_omega: float = 1.0
    groups: int = 40
    group_size: int = 8

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            key = _key(f.name)
            if f.type in (int, "int"):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{key} must be an integer, got {v!r}")
            elif f.type in (float, "float"):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{key} must be a number, got {v!r}")
                object.__setattr__(self, f.name, float(v))
            elif not isinstance(v, str):
                raise ConfigError(f"{key} must be a string, got {v!r}")
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if not 0 < self.k_percent <= 100:
            raise ConfigError("k_percent must lie in (0, 100]")
        try:
            self.u2a()
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d):
        known = {_key(f.name) for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{_RENAMED.get(k, k): v for k, v in d.items()})

    def to_dict(self):
        return {_key(k): v for k, v in asdict(self).items()}

    def merged(self, overrides):
        """Copy with non-None ``overrides`` (external keys) applied."""
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(d)

    def hash(self):
        return config_hash(self.to_dict())

    def inner(self):
        return InnerConfig(lam=self.lam, steps=self.inner_steps, lr=self.inner_lr, tol=self.inner_tol)

    def loss(self, retain=()):
        return ForgetLoss(self.forget_loss, self.npo_beta, self.retain_weight,
                          tuple(tuple(s) for s in retain) if self.forget_loss == "graddiff" else ())

    def u2a(self):
        return U2AConfig(
            T=self.T,
            delta=self.delta,
            seed=self.seed,
            gain_sign=self.gain_sign,
            inner=self.inner(),
            outer=OuterConfig(beta=self.beta, lr=self.outer_lr, steps=self.outer_steps),
            cg=CGConfig(tol=self.cg_tol, max_iters=self.cg_max_iters),
        )


def _key(attr):
    for k, v in _RENAMED.items():
        if v == attr:
            return k
    return attr


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file at ``path``, then non-None ``overrides``."""
    base = {}
    if path is not None:
        base = read_json(path)
        if not isinstance(base, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    cfg = RunConfig.from_dict(base)
    return cfg.merged(overrides or {})
