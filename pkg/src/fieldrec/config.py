"""Flat key=value pipeline configuration.

One namespace for every tunable in the pipeline; defaults follow the
training recipe's published values where the paper-trail gives them
(loss weights, schedule, sampling recipe) and this artifact's documented
choices everywhere else. Unknown keys are rejected, and every run writes
the fully resolved configuration next to its outputs so experiments stay
line-diffable.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ArgumentError
from .field import FieldSpec
from .training import LossWeights, LrSchedule, TrainerConfig


@dataclass
class PipelineConfig:
    seed: int = 0
    # training
    iterations: int = 20000
    warmup: int = 10000
    lr: float = 1e-4
    batch_q: int = 5000
    batch_g: int = 5000
    rounds: int = 10
    dis_scale: float = 0.15
    local_scale_k: int = 50
    max_points: int = 300000
    scales: tuple = (4, 8, 16, 32, 64)
    rho: float = 10.0
    weight_alpha: float = 0.3
    weight_beta: float = 10.0
    weight_gamma: float = 1.0
    weight_delta: float = 0.01
    log_every: int = 10
    checkpoint_every: int = 1000
    # field architecture
    bands: int = 6
    tokens: int = 16
    heads: int = 8
    layers: int = 8
    width: int = 256
    # extraction / inpainting
    fill_grid: int = 128
    final_grid: int = 256
    grid_margin: float = 0.05
    fill_samples: int = 100000
    # rimls
    rimls_h_factor: float = 4.0
    rimls_sigma_r_factor: float = 0.5
    rimls_sigma_n: float = 0.5
    rimls_iters: int = 10
    rimls_tol: float = 1e-4
    rimls_band_factor: float = 2.0
    # metrics
    metrics_cd_samples: int = 100000
    metrics_f_samples: int = 10000
    metrics_tau_rel: float = 0.005
    metrics_seed: int = 0
    # ablation switches
    no_mls: bool = False
    no_fill: bool = False
    no_attention: bool = False

    # ------------------------------------------------------------------
    @staticmethod
    def _parse_value(name, text, kind):
        text = text.strip()
        try:
            if kind is bool:
                low = text.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(text)
            if kind is int:
                return int(text)
            if kind is float:
                return float(text)
            if kind is tuple:
                return tuple(int(v) for v in text.split(",") if v.strip())
            return text
        except ValueError:
            raise ArgumentError(f"bad value for '{name}': {text!r}") from None

    def set_key(self, name, text):
        name = name.replace("-", "_")
        for f in fields(self):
            if f.name == name:
                setattr(self, name, self._parse_value(name, text, type(getattr(self, name))))
                return
        raise ArgumentError(f"unknown config key '{name}'")

    @classmethod
    def load(cls, path=None, overrides=()):
        """Config file first, then --key=value overrides."""
        cfg = cls()
        if path is not None:
            with open(path, "r") as f:
                for lineno, line in enumerate(f, start=1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ArgumentError(f"{path}:{lineno}: expected 'key = value'")
                    key, value = line.split("=", 1)
                    cfg.set_key(key.strip(), value)
        for item in overrides:
            if not item.startswith("--"):
                raise ArgumentError(f"override '{item}' must look like --key=value")
            body = item[2:]
            if "=" in body:
                key, value = body.split("=", 1)
            else:
                key, value = body, "true"  # bare boolean flag
            cfg.set_key(key, value)
        return cfg

    def resolved_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.resolved_text())

    # ------------------------------------------------------------------
    def field_spec(self):
        from .field import matched_mlp_width
        base = FieldSpec(kind="attentive", bands=self.bands, tokens=self.tokens,
                         heads=self.heads, layers=self.layers, width=self.width)
        if not self.no_attention:
            return base
        return FieldSpec(kind="mlp", bands=self.bands, tokens=0, heads=1,
                         layers=self.layers, width=matched_mlp_width(base))

    def trainer_config(self):
        return TrainerConfig(seed=self.seed, iterations=self.iterations,
                             batch_q=self.batch_q, batch_g=self.batch_g,
                             rounds=self.rounds, dis_scale=self.dis_scale,
                             local_scale_k=self.local_scale_k,
                             max_points=self.max_points, scales=self.scales,
                             log_every=self.log_every,
                             checkpoint_every=self.checkpoint_every)

    def lr_schedule(self):
        return LrSchedule(base=self.lr, warmup=self.warmup, total=self.iterations)

    def loss_weights(self):
        return LossWeights(alpha=self.weight_alpha, beta=self.weight_beta,
                           gamma=self.weight_gamma, delta=self.weight_delta,
                           rho=self.rho)

    def rimls_kwargs(self):
        return dict(h_factor=self.rimls_h_factor,
                    sigma_r_factor=self.rimls_sigma_r_factor,
                    sigma_n=self.rimls_sigma_n, max_iters=self.rimls_iters,
                    tol=self.rimls_tol, band_factor=self.rimls_band_factor,
                    seed=self.seed)
