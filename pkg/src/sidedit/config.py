"""Run configuration: nested dataclasses persisted as an INI file."""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class DataSection:
    source: str = "synthetic"  # "synthetic" or a path to interactions JSON-lines
    boundaries: str = ""  # "valid_start,test_start" for ingested data; synthetic derives its own
    n_items: int = 2000
    n_cold: int = 200
    n_users: int = 5000
    seq_len_min: int = 5
    seq_len_max: int = 10
    n_clusters: int = 8
    noise: float = 0.1
    horizon: float = 1000.0
    takeover: float = 0.7
    seed: int = 0


@dataclass
class TokenizerSection:
    M: int = 4
    K: int = 64
    d_emb: int = 32
    seed: int = 0


@dataclass
class ModelSection:
    d_model: int = 64
    d_ff: int = 256
    n_enc_layers: int = 2
    n_dec_layers: int = 6
    n_heads: int = 4
    activation: str = "gated-silu"
    precision: str = "fp32"
    history_window: int = 2  # most recent items fed to the encoder
    seed: int = 0


@dataclass
class TrainSection:
    epochs: int = 12
    batch_size: int = 256
    lr: float = 3e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0


@dataclass
class KnowledgeSection:
    k: int = 5
    quota: int = 4
    max_len: int = 20


@dataclass
class LocatorSection:
    n_original: int = 0  # 0 means as many as there are requests
    split_ratio: float = 0.8
    seed: int = 0


@dataclass
class EditSection:
    lam: float = 1.0
    lam_grid: str = "0.03,0.1,0.3,1,3,10,100,1000,10000"
    jitter_scale: float = 1e-6
    max_steps: int = 25
    target_prob: float = 0.99
    clamp_factor: float = 4.0
    lr_scale: float = 0.5
    cov_samples: int = 2000
    seed: int = 0


@dataclass
class DecodeSection:
    beam: int = 20
    top_k: int = 20
    constrain: bool = False
    mode: str = "one-one"


@dataclass
class EvalSection:
    n_eval: int = 1500  # examples sampled from the test (and validation) split; 0 = all
    ks: str = "10,20,50"
    iid_norm: str = "share"
    finetune_epochs: int = 3
    finetune_lr_scale: float = 0.1
    seed: int = 0


@dataclass
class RunSection:
    threads: int = 1
    seed: int = 0


_SECTIONS = {
    "data": DataSection,
    "tokenizer": TokenizerSection,
    "model": ModelSection,
    "train": TrainSection,
    "knowledge": KnowledgeSection,
    "locator": LocatorSection,
    "edit": EditSection,
    "decode": DecodeSection,
    "eval": EvalSection,
    "run": RunSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    knowledge: KnowledgeSection = field(default_factory=KnowledgeSection)
    locator: LocatorSection = field(default_factory=LocatorSection)
    edit: EditSection = field(default_factory=EditSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    # ------------------------------------------------------------ text form

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for name in _SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"unreadable config: {e}") from None
        cfg = cls()
        for name in cp.sections():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown config section [{name}]")
            for key, raw in cp[name].items():
                cfg.set(f"{name}.{key}", raw)
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    # ------------------------------------------------------------ overrides

    def set(self, dotted: str, raw) -> "RunConfig":
        """Set ``section.key`` from a string (or typed) value."""
        try:
            name, key = dotted.split(".", 1)
            sec = getattr(self, name)
            ftype = {f.name: f.type for f in fields(sec)}[key]
        except (ValueError, AttributeError, KeyError):
            raise ConfigError(f"unknown config key {dotted!r}") from None
        setattr(sec, key, _parse(raw, ftype, dotted))
        return self

    def lam_grid(self) -> list[float]:
        return [float(x) for x in self.edit.lam_grid.split(",") if x.strip()]

    def ks(self) -> tuple:
        return tuple(int(x) for x in self.eval.ks.split(",") if x.strip())

    def validate(self) -> "RunConfig":
        if self.tokenizer.M < 1 or self.tokenizer.K < 2:
            raise ConfigError("tokenizer needs M >= 1 and K >= 2")
        if self.decode.beam < self.decode.top_k:
            raise ConfigError("decode.beam must be >= decode.top_k")
        if self.decode.mode not in ("one-one", "all-on", "off"):
            raise ConfigError(f"decode.mode {self.decode.mode!r} not in one-one/all-on/off")
        if self.eval.iid_norm not in ("paper", "share"):
            raise ConfigError("eval.iid_norm must be paper or share")
        if self.edit.lam < 0 or any(l < 0 for l in self.lam_grid()):
            raise ConfigError("lambda must be non-negative")
        if not 0 < self.locator.split_ratio < 1:
            raise ConfigError("locator.split_ratio must be in (0, 1)")
        if self.run.threads < 1:
            raise ConfigError("run.threads must be >= 1")
        if not self.ks() or min(self.ks()) < 1:
            raise ConfigError("eval.ks needs positive cutoffs")
        return self


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw, ftype: str, key: str):
    if not isinstance(raw, str):
        return raw
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} ({ftype})") from None
    return raw
