"""One flat key=value configuration shared by every pipeline stage.

A config file uses `key=value` lines ('#' starts a comment); the command
line overrides single keys with `--key value`. Unknown keys are rejected
rather than ignored, so a typo cannot silently fall back to a default.

Keys and defaults:

  network      input_h=96 input_w=128 channels_res2=16 channels_res3=32
               channels_res4=48 channels_res5=64 aspp_rates=1,2,4,6
               use_imu=true seed=0
  losses       lambda1=0.01 lambda2=1e-6 focal_gamma=2.0 ws_stage=res5
               ws_epsilon=1e-8 ws_through_mu=true
  training     epochs=5 lr0=1e-4 poly_power=0.9
  generator    count=200 roll_min=-0.12 roll_max=0.12 pitch_min=-0.10
               pitch_max=0.10 water_amplitude=0.06 glitter_prob=0.35
               reflection_strength=0.5 obstacle_min=1 obstacle_max=3
               obstacle_size_min=12 obstacle_size_max=24 distractor_max=2
               haze_strength=0.25
  augmentation aug_expand=false aug_mirror=true aug_rotations=-15,-5,5,15
               aug_elastic_step=16 aug_elastic_disp=3.0 aug_color_refs=1
               aug_seed=0
  evaluation   iou_threshold=0.3 min_area=0   (0 means resolution-scaled)
"""

from dataclasses import dataclass, fields
from pathlib import Path

from .augment import AugSpec
from .errors import UsageError
from .losses import LossWeights
from .network import NetConfig
from .synth import SceneParams


@dataclass
class RunConfig:
    input_h: int = 96
    input_w: int = 128
    channels_res2: int = 16
    channels_res3: int = 32
    channels_res4: int = 48
    channels_res5: int = 64
    aspp_rates: tuple = (1, 2, 4, 6)
    use_imu: bool = True
    seed: int = 0

    lambda1: float = 0.01
    lambda2: float = 1e-6
    focal_gamma: float = 2.0
    ws_stage: str = "res5"
    ws_epsilon: float = 1e-8
    ws_through_mu: bool = True

    epochs: int = 5
    lr0: float = 1e-4
    poly_power: float = 0.9

    count: int = 200
    roll_min: float = -0.12
    roll_max: float = 0.12
    pitch_min: float = -0.10
    pitch_max: float = 0.10
    water_amplitude: float = 0.06
    glitter_prob: float = 0.35
    reflection_strength: float = 0.5
    obstacle_min: int = 1
    obstacle_max: int = 3
    obstacle_size_min: int = 12
    obstacle_size_max: int = 24
    distractor_max: int = 2
    haze_strength: float = 0.25

    aug_expand: bool = False
    aug_mirror: bool = True
    aug_rotations: tuple = (-15.0, -5.0, 5.0, 15.0)
    aug_elastic_step: int = 16
    aug_elastic_disp: float = 3.0
    aug_color_refs: int = 1
    aug_seed: int = 0

    iou_threshold: float = 0.3
    min_area: int = 0  # 0 picks the resolution-scaled default

    # -- views consumed by the pipeline stages --------------------------------

    def net_config(self, use_imu=None):
        return NetConfig(
            input_size=(self.input_h, self.input_w),
            encoder_channels=(self.channels_res2, self.channels_res3,
                              self.channels_res4, self.channels_res5),
            aspp_rates=tuple(int(r) for r in self.aspp_rates),
            use_imu=self.use_imu if use_imu is None else use_imu,
            seed=self.seed,
        )

    def scene_params(self):
        return SceneParams(
            image_size=(self.input_h, self.input_w),
            roll_range=(self.roll_min, self.roll_max),
            pitch_range=(self.pitch_min, self.pitch_max),
            water_amplitude=self.water_amplitude,
            glitter_prob=self.glitter_prob,
            reflection_strength=self.reflection_strength,
            obstacle_count_range=(self.obstacle_min, self.obstacle_max),
            obstacle_size_range=(self.obstacle_size_min, self.obstacle_size_max),
            distractor_count_range=(0, self.distractor_max),
            haze_strength=self.haze_strength,
            seed=self.seed,
        )

    def loss_weights(self):
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2,
                           gamma=self.focal_gamma)

    def aug_spec(self):
        return AugSpec(
            mirror=self.aug_mirror,
            rotations_deg=self.aug_rotations,
            elastic_step=self.aug_elastic_step,
            elastic_disp=self.aug_elastic_disp,
            color_refs=self.aug_color_refs,
            seed=self.aug_seed,
        )

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(_plain(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            else:
                value = _plain(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def save_effective(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective.cfg").write_text(self.to_text())


def _plain(value):
    return repr(value) if isinstance(value, float) else str(value)


_BOOL_WORDS = {
    "true": True, "1": True, "yes": True, "on": True,
    "false": False, "0": False, "no": False, "off": False,
}


def _parse_value(name, default, raw):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            word = raw.lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOL_WORDS[word]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            element = default[0] if default else 1.0
            cast = int if isinstance(element, int) else float
            return tuple(cast(part) for part in raw.split(","))
        return raw
    except ValueError as exc:
        raise UsageError(f"config key {name!r}: {exc}") from None


def load_config(path=None, overrides=None):
    """Build a RunConfig from an optional file plus --key value overrides."""
    defaults = {f.name: getattr(RunConfig(), f.name) for f in fields(RunConfig)}
    values = {}

    if path is not None:
        seen = set()
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, val = line.partition("=")
                key = key.strip()
                if not sep:
                    raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
                if key not in defaults:
                    raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
                if key in seen:
                    raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
                seen.add(key)
                values[key] = _parse_value(key, defaults[key], val)

    for key, raw in (overrides or {}).items():
        if key not in defaults:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, defaults[key], raw)

    return RunConfig(**{**defaults, **values})
