"""Named model configurations and their builders.

Twelve catalog entries cover three task families, each with selective-SSM
and attention variants at matched sizes.  An entry records dimension,
layer counts, token resolution in milliseconds, task, and whether Mamba
layers carry a trailing feed-forward.  The builder turns an entry plus a
seed into a working model; the catalog itself is plain data and can round
trip through JSON.

Layer-count cells use the flattened totals.  The separation transformer
is usually written "16 x 2" (16 dual-path blocks visiting each token
twice); here that budget is spent as 32 single-path layers of the same
width, recorded in LAYER_NOTATION for display.
"""

from __future__ import annotations

import dataclasses
import json
from fractions import Fraction

from .archs import CodecLm, SpeechRecognizer, TasNetModel, tokens_for_duration
from .seqcore import Rng

TASKS = ("separation", "asr", "tts")
_LAYER_KEY_SETS = ({"encoder", "decoder"}, {"ar", "nar"})


@dataclasses.dataclass(frozen=True)
class ModelPreset:
    name: str
    dim: int
    layers: dict
    token_res_ms: float
    task: str
    feedforward: bool

    def tokens_for(self, duration_s) -> int:
        """Token count for a duration in seconds at this resolution."""
        return tokens_for_duration(Fraction(duration_s) * 1000, self.token_res_ms)


def _p(name, dim, layers, res, task, ff):
    return ModelPreset(name, dim, layers, res, task, ff)


_TTS_RES = 40 / 3           # 75 codec frames per second

PRESETS = {p.name: p for p in [
    _p("sepformer", 256, {"encoder": 32, "decoder": 0}, 1, "separation", True),
    _p("mamba-tasnet-m", 256, {"encoder": 32, "decoder": 0}, 1, "separation", False),
    _p("mamba-tasnet-l", 512, {"encoder": 32, "decoder": 0}, 1, "separation", False),
    _p("conformer-s", 144, {"encoder": 12, "decoder": 4}, 40, "asr", True),
    _p("conmamba-s", 144, {"encoder": 12, "decoder": 4}, 40, "asr", True),
    _p("conformer-l", 512, {"encoder": 12, "decoder": 6}, 40, "asr", True),
    _p("conmamba-l", 512, {"encoder": 12, "decoder": 6}, 40, "asr", True),
    _p("conformer-ctc", 256, {"encoder": 18, "decoder": 0}, 40, "asr", True),
    _p("conmamba-ctc", 256, {"encoder": 18, "decoder": 0}, 40, "asr", True),
    _p("vall-e", 1024, {"ar": 12, "nar": 12}, _TTS_RES, "tts", True),
    _p("vall-m", 1024, {"ar": 12, "nar": 12}, _TTS_RES, "tts", True),
    _p("vall-me", 1024, {"ar": 12, "nar": 12}, _TTS_RES, "tts", True),
]}

# Display forms of the layer cells whose flattened totals appear above.
LAYER_NOTATION = {
    "sepformer": "16 x 2",
    "conformer-s": "12 + 4", "conmamba-s": "12 + 4",
    "conformer-l": "12 + 6", "conmamba-l": "12 + 6",
    "conformer-ctc": "18", "conmamba-ctc": "18",
    "vall-e": "12 + 12", "vall-m": "12 + 12", "vall-me": "12 + 12",
    "mamba-tasnet-m": "32", "mamba-tasnet-l": "32",
}


def load_preset(name: str) -> ModelPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")


_ATTENTION_NAMES = {"sepformer", "conformer-s", "conformer-l", "conformer-ctc",
                    "vall-e"}


def arch_kinds(name: str) -> tuple:
    """Internal block family per stack, derived from the entry name."""
    if name == "vall-me":
        return ("attention", "mamba")      # attention AR, selective-SSM NAR
    kind = "attention" if name in _ATTENTION_NAMES else "mamba"
    return (kind, kind) if name.startswith("vall") else (kind,)


def to_json(preset: ModelPreset) -> dict:
    return {"name": preset.name, "dim": preset.dim,
            "layers": dict(preset.layers), "token_res_ms": preset.token_res_ms,
            "task": preset.task, "feedforward": preset.feedforward}


def from_json(data: dict) -> ModelPreset:
    required = {"name", "dim", "layers", "token_res_ms", "task", "feedforward"}
    if not isinstance(data, dict) or set(data) != required:
        raise ValueError(f"preset object must have exactly the keys {sorted(required)}")
    if not isinstance(data["name"], str) or not data["name"]:
        raise ValueError("name must be a non-empty string")
    if not isinstance(data["dim"], int) or data["dim"] < 1:
        raise ValueError("dim must be a positive integer")
    layers = data["layers"]
    if not isinstance(layers, dict) or set(layers) not in _LAYER_KEY_SETS:
        raise ValueError('layers must be {"encoder","decoder"} or {"ar","nar"} counts')
    for key, value in layers.items():
        if not isinstance(value, int) or value < 0:
            raise ValueError(f"layer count {key} must be a non-negative integer")
    if not isinstance(data["token_res_ms"], (int, float)) or data["token_res_ms"] <= 0:
        raise ValueError("token_res_ms must be a positive number")
    if data["task"] not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if not isinstance(data["feedforward"], bool):
        raise ValueError("feedforward must be a boolean")
    return ModelPreset(data["name"], data["dim"], dict(layers),
                       data["token_res_ms"], data["task"], data["feedforward"])


def dump_catalog() -> str:
    return json.dumps([to_json(p) for p in PRESETS.values()], indent=2)


def build_model(preset: ModelPreset, seed: int = 0, depth_scale: float = 1.0):
    """Construct the preset's model with seeded weights.

    depth_scale < 1 shrinks every stack (minimum one layer where the
    catalog has any) for scaled-down runs on small machines; relative
    costs between variants are preserved because widths stay put.
    """
    if depth_scale <= 0:
        raise ValueError("depth_scale must be positive")

    def scaled(n: int) -> int:
        return 0 if n == 0 else max(1, round(n * depth_scale))

    rng = Rng(seed)
    kinds = arch_kinds(preset.name)
    if preset.task == "separation":
        return TasNetModel(preset.dim, scaled(preset.layers["encoder"]), rng,
                           kind=kinds[0],
                           ff=preset.feedforward and kinds[0] == "mamba")
    if preset.task == "asr":
        return SpeechRecognizer(preset.dim, scaled(preset.layers["encoder"]),
                                scaled(preset.layers["decoder"]), rng,
                                kind=kinds[0])
    if preset.task == "tts":
        return CodecLm(preset.dim, scaled(preset.layers["ar"]),
                       scaled(preset.layers["nar"]), rng,
                       ar_kind=kinds[0], nar_kind=kinds[1])
    raise ValueError(f"unknown task {preset.task!r}")


def param_count(model) -> int:
    return model.param_count()
