"""Model/placement configuration, validation, canonical records, and presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

SUBLAYERS = ("Q", "K", "V", "O")
PLACEMENT_MODES = ("none", "attn", "ffn", "all")
NORMS = ("layer", "rms")
ORDERS = ("setting1", "setting2", "postnorm")
FFN_VARIANTS = ("relu2", "swiglu3")
POSITIONS = ("learned", "rotary")
PRECISIONS = ("float32", "float64")


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


def _canonical_sublayers(subs):
    if isinstance(subs, str):
        subs = [s.strip() for s in subs.replace("+", ",").split(",") if s.strip()]
    subs = [s.upper() for s in subs]
    bad = [s for s in subs if s not in SUBLAYERS]
    if bad:
        raise ConfigError(f"unknown attention sublayer(s) {bad}; expected a subset of Q,K,V,O")
    return tuple(s for s in SUBLAYERS if s in subs)


@dataclass(frozen=True)
class PlacementSpec:
    mode: str = "none"
    attn_sublayers: tuple = SUBLAYERS
    r: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "attn_sublayers", _canonical_sublayers(self.attn_sublayers))

    def validate(self):
        if self.mode not in PLACEMENT_MODES:
            raise ConfigError(f"placement.mode must be one of {PLACEMENT_MODES}, got {self.mode!r}")
        if self.mode != "none":
            if self.r is None or int(self.r) <= 0:
                raise ConfigError(f"placement.r must be a positive integer when mode={self.mode}")
            if self.mode in ("attn", "all") and not self.attn_sublayers:
                raise ConfigError("placement.attn_sublayers must be non-empty when attention is factored")

    def factored_sublayers(self):
        """Attention sublayers that get factored modules."""
        return self.attn_sublayers if self.mode in ("attn", "all") else ()

    @property
    def ffn_factored(self):
        return self.mode in ("ffn", "all")

    def canonical(self):
        """Equivalent spec with fields that ``mode`` ignores reset."""
        if self.mode == "none":
            return PlacementSpec("none", SUBLAYERS, None)
        if self.mode == "ffn":
            return PlacementSpec("ffn", SUBLAYERS, self.r)
        return self


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 257
    d_model: int = 64
    head_count: int = 4
    ffn_dim: int = 256
    layer_count: int = 2
    max_seq_len: int = 128
    norm: str = "layer"
    order: str = "setting1"
    ffn_variant: str = "relu2"
    placement: PlacementSpec = field(default_factory=PlacementSpec)
    attn_inner_dim: int | None = None
    position: str = "learned"
    tie_embeddings: bool = False
    precision: str = "float64"

    @property
    def d_a(self):
        return self.d_model if self.attn_inner_dim is None else self.attn_inner_dim

    @property
    def head_dim(self):
        return self.d_a // self.head_count

    @property
    def ffn_matrix_count(self):
        return 3 if self.ffn_variant == "swiglu3" else 2

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_placement(self, mode, r=None, attn_sublayers=SUBLAYERS):
        return self.replace(placement=PlacementSpec(mode, attn_sublayers, r))

    def validate(self):
        for name in ("vocab_size", "d_model", "head_count", "ffn_dim", "layer_count", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.attn_inner_dim is not None and (not isinstance(self.attn_inner_dim, int) or self.attn_inner_dim <= 0):
            raise ConfigError(f"attn_inner_dim must be a positive integer, got {self.attn_inner_dim!r}")
        if self.d_a % self.head_count:
            raise ConfigError(f"attention inner dim {self.d_a} must be divisible by head_count {self.head_count}")
        for name, allowed in (
            ("norm", NORMS),
            ("order", ORDERS),
            ("ffn_variant", FFN_VARIANTS),
            ("position", POSITIONS),
            ("precision", PRECISIONS),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.position == "rotary" and self.head_dim % 2:
            raise ConfigError(f"rotary positions need an even head dim, got {self.head_dim}")
        self.placement.validate()
        return self


# canonical key=value records ------------------------------------------------

_MODEL_KEYS = (
    "vocab_size", "d_model", "head_count", "ffn_dim", "layer_count", "max_seq_len",
    "norm", "order", "ffn_variant", "attn_inner_dim", "position", "tie_embeddings", "precision",
)
_INT_KEYS = {"vocab_size", "d_model", "head_count", "ffn_dim", "layer_count", "max_seq_len", "attn_inner_dim"}


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def model_fields(cfg: ModelConfig):
    """Flat ``{key: text}`` mapping of a config; placement keys get a prefix."""
    out = {k: _fmt(getattr(cfg, k)) for k in _MODEL_KEYS}
    p = cfg.placement
    out["placement.mode"] = p.mode
    out["placement.attn_sublayers"] = _fmt(p.attn_sublayers)
    out["placement.r"] = _fmt(p.r)
    return out


def parse_bool(text):
    t = str(text).strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def parse_int(key, text, allow_none=False):
    t = str(text).strip()
    if allow_none and t.lower() in ("none", ""):
        return None
    try:
        return int(t)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {text!r}") from None


def model_from_fields(fields, base: ModelConfig | None = None):
    """Apply ``{key: text}`` overrides onto ``base`` (defaults if None)."""
    cfg = base or ModelConfig()
    changes = {}
    placement = {}
    for key, text in fields.items():
        if key.startswith("placement."):
            sub = key.split(".", 1)[1]
            if sub == "mode":
                placement["mode"] = str(text).strip()
            elif sub == "attn_sublayers":
                placement["attn_sublayers"] = _canonical_sublayers(str(text))
            elif sub == "r":
                placement["r"] = parse_int(key, text, allow_none=True)
            else:
                raise ConfigError(f"unknown placement key {sub!r}")
        elif key in _INT_KEYS:
            changes[key] = parse_int(key, text, allow_none=(key == "attn_inner_dim"))
        elif key == "tie_embeddings":
            changes[key] = parse_bool(text)
        elif key in _MODEL_KEYS:
            changes[key] = str(text).strip()
        else:
            raise ConfigError(f"unknown model key {key!r}")
    if placement:
        changes["placement"] = dataclasses.replace(cfg.placement, **placement)
    return cfg.replace(**changes)


def render_record(cfg: ModelConfig, extra=None):
    fields = model_fields(cfg)
    if extra:
        fields.update({k: _fmt(v) for k, v in extra.items()})
    return "".join(f"{k}={fields[k]}\n" for k in sorted(fields))


def parse_record(text):
    """Inverse of :func:`render_record`; returns ``(config, extra_fields)``."""
    model, extra = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config record line {line!r}")
        key, value = line.split("=", 1)
        (extra if key.startswith("state.") else model)[key] = value
    return model_from_fields(model), extra


# presets --------------------------------------------------------------------
# Published rows use a 32000-token untied vocabulary; that choice reproduces the
# published totals (see accounting tests).

PUBLISHED_VOCAB = 32000


def _s1(d, h, ffn, layers, seq, placement=None):
    return ModelConfig(
        vocab_size=PUBLISHED_VOCAB, d_model=d, head_count=h, ffn_dim=ffn, layer_count=layers,
        max_seq_len=seq, norm="layer", order="setting1", ffn_variant="relu2",
        placement=placement or PlacementSpec(), position="learned", precision="float32",
    )


def _s2(d, h, ffn, layers, seq, placement=None):
    return ModelConfig(
        vocab_size=PUBLISHED_VOCAB, d_model=d, head_count=h, ffn_dim=ffn, layer_count=layers,
        max_seq_len=seq, norm="rms", order="setting2", ffn_variant="swiglu3",
        placement=placement or PlacementSpec(), position="rotary", precision="float32",
    )


def _large(layers, placement=None):
    # 3B rows: pre-norm with a two-matrix relu FFN and rotary positions
    return ModelConfig(
        vocab_size=PUBLISHED_VOCAB, d_model=4096, head_count=32, ffn_dim=14436, layer_count=layers,
        max_seq_len=4096, norm="layer", order="setting2", ffn_variant="relu2",
        placement=placement or PlacementSpec(), position="rotary", precision="float32",
    )


def _lpa(r, subs=SUBLAYERS):
    return PlacementSpec("attn", subs, r)


DESK = ModelConfig(
    vocab_size=257, d_model=64, head_count=4, ffn_dim=256, layer_count=2, max_seq_len=128,
    norm="layer", order="setting1", ffn_variant="relu2", position="learned", precision="float32",
)

PRESETS: dict[str, ModelConfig] = {
    "desk": DESK,
    "desk-lpa-r16": DESK.with_placement("attn", 16),
    "desk-low-ffn-r16": DESK.with_placement("ffn", 16),
    "desk-low-all-r16": DESK.with_placement("all", 16),
    "desk-setting2": DESK.replace(norm="rms", order="setting2", ffn_variant="swiglu3", position="rotary"),
    "bench-d512": DESK.replace(d_model=512, head_count=8, ffn_dim=2048, layer_count=2, max_seq_len=256),
    "setting1-135m": _s1(768, 8, 3072, 12, 512),
    "setting1-lpa-125m-r256": _s1(768, 8, 3072, 12, 512, _lpa(256)),
    "setting1-369m": _s1(1024, 8, 4096, 24, 1024),
    "setting1-lpa-319m-r256": _s1(1024, 8, 4096, 24, 1024, _lpa(256)),
    "setting1-lpa-293m-r128": _s1(1024, 8, 4096, 24, 1024, _lpa(128)),
    "setting1-lpa-281m-r64": _s1(1024, 8, 4096, 24, 1024, _lpa(64)),
    "setting1-lpa-274m-r32": _s1(1024, 8, 4096, 24, 1024, _lpa(32)),
    "setting1-lpa-kv-344m-r256": _s1(1024, 8, 4096, 24, 1024, _lpa(256, ("K", "V"))),
    "setting1-lpa-qkv-331m-r256": _s1(1024, 8, 4096, 24, 1024, _lpa(256, ("Q", "K", "V"))),
    "setting2-134m": _s2(768, 12, 2048, 12, 256),
    "setting2-lpa-115m-r128": _s2(768, 12, 2048, 12, 256, _lpa(128)),
    "setting2-368m": _s2(1024, 16, 2736, 24, 512),
    "setting2-lpa-318m-r256": _s2(1024, 16, 2736, 24, 512, _lpa(256)),
    "setting2-lpa-kv-343m-r256": _s2(1024, 16, 2736, 24, 512, _lpa(256, ("K", "V"))),
    "setting2-lpa-qkv-330m-r256": _s2(1024, 16, 2736, 24, 512, _lpa(256, ("Q", "K", "V"))),
    "3b-same-dim-3.23b": _large(16),
    "3b-same-param-2.49b": _large(12),
    "3b-lpa-r512": _large(16, _lpa(512)),
}

# published totals for the preset rows, in parameters
PUBLISHED_TOTALS = {
    "setting1-135m": 135e6,
    "setting1-lpa-125m-r256": 125e6,
    "setting1-369m": 369e6,
    "setting1-lpa-319m-r256": 319e6,
    "setting1-lpa-293m-r128": 293e6,
    "setting1-lpa-281m-r64": 281e6,
    "setting1-lpa-274m-r32": 274e6,
    "setting1-lpa-kv-344m-r256": 344e6,
    "setting1-lpa-qkv-331m-r256": 331e6,
    "setting2-134m": 134e6,
    "setting2-lpa-115m-r128": 115e6,
    "setting2-368m": 368e6,
    "setting2-lpa-318m-r256": 318e6,
    "setting2-lpa-kv-343m-r256": 343e6,
    "setting2-lpa-qkv-330m-r256": 330e6,
    "3b-same-dim-3.23b": 3.23e9,
    "3b-same-param-2.49b": 2.49e9,
    "3b-lpa-r512": 2.43e9,
}


def get_preset(name) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None
