#!/usr/bin/env python3
"""
Zero-shot Blind Deconvolution - Configuration Script

Creates, validates and displays the optional JSON run configuration
(selfdeblur_config.json).  Values are layered as

    preset defaults  <  --config file  <  explicit command-line flags
"""

import json
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from blur_data import estimate_sigma
from blur_model import lambda_from_sigma
from deblur_errors import ConfigurationError
from solver import RunConfig

PRESETS = ('full', 'desk')
CLI_MODES = {'joint': 'joint', 'alternating': 'alternating', 'fixed-kernel': 'fixed_kernel'}
DEFAULT_CONFIG_FILE = "selfdeblur_config.json"


def preset_config(preset: str, kernel_size: int = 31) -> RunConfig:
    if preset == 'full':
        return RunConfig.full(kernel_size)
    if preset == 'desk':
        return RunConfig.desk(kernel_size)
    raise ConfigurationError(f"unknown preset '{preset}', choose one of {PRESETS}")


def _merge_section(current, values: Dict[str, Any], section: str):
    known = {f.name for f in fields(current)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown {section} keys: {', '.join(unknown)}")
    return replace(current, **values)


def _rescale_schedule(cfg: RunConfig, values: Dict[str, Any]) -> Dict[str, Any]:
    """A new T without an explicit schedule scales the milestones and keeps snapshots that still fit."""
    T = int(values['iterations'])
    if 'milestones' not in values:
        scaled = sorted({round(m * T / cfg.iterations) for m in cfg.milestones})
        values['milestones'] = [m for m in scaled if 1 <= m < T]
    if 'snapshot_iters' not in values:
        values['snapshot_iters'] = [s for s in cfg.snapshot_iters if s <= T]
    return values


def apply_overrides(cfg: RunConfig, values: Optional[Dict[str, Any]]) -> RunConfig:
    """Layer a (possibly nested) dict of RunConfig values over cfg; dataclasses re-validate."""
    if not values:
        return cfg
    values = dict(values)
    gx_values = values.pop('gx', None)
    gk_values = values.pop('gk', None)
    if 'lambda' in values:
        values['lam'] = values.pop('lambda')
    if 'iterations' in values and values['iterations'] != cfg.iterations:
        values = _rescale_schedule(cfg, values)
    try:
        gx = _merge_section(cfg.gx, gx_values, 'gx') if gx_values else cfg.gx
        gk = _merge_section(cfg.gk, gk_values, 'gk') if gk_values else cfg.gk
        return _merge_section(cfg, dict(values, gx=gx, gk=gk), 'run')
    except TypeError as e:
        raise ConfigurationError(f"invalid configuration value: {e}")


def build_run_config(preset: str = 'full', kernel_size: Optional[int] = None,
                     file_values: Optional[Dict[str, Any]] = None,
                     flag_values: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Resolve preset -> config file -> flags into one validated RunConfig."""
    cfg = preset_config(preset, kernel_size or 31)
    cfg = apply_overrides(cfg, file_values)
    if kernel_size is not None and cfg.gk.kernel_size != kernel_size:
        cfg = replace(cfg, gk=replace(cfg.gk, kernel_size=kernel_size))
    return apply_overrides(cfg, flag_values)


def _flag_values(args) -> Dict[str, Any]:
    flags: Dict[str, Any] = {}
    if getattr(args, 'iters', None) is not None:
        flags['iterations'] = args.iters
    if getattr(args, 'seed', None) is not None:
        flags['seed'] = args.seed
    if getattr(args, 'snapshot_iters', None) is not None:
        flags['snapshot_iters'] = args.snapshot_iters
    if getattr(args, 'lr', None) is not None:
        flags['lr0'] = args.lr
    if getattr(args, 'deterministic', False):
        flags['deterministic'] = True
    if getattr(args, 'fft', False):
        flags['use_fft'] = True
    if getattr(args, 'gk_variant', None):
        flags['gk'] = {'depth_variant': args.gk_variant}
    mode = getattr(args, 'mode', None)
    if mode in CLI_MODES:
        flags['mode'] = CLI_MODES[mode]
    flags['show_progress'] = not getattr(args, 'no_progress', False) and sys.stderr.isatty()
    return flags


def resolve_run_config(args, kernel_size: Optional[int] = None) -> RunConfig:
    """RunConfig for parsed command-line args: preset, then --config file, then flags."""
    file_values: Dict[str, Any] = {}
    preset = getattr(args, 'preset', None)
    if getattr(args, 'config', None):
        file_values = dict(DeblurConfig(args.config).load_config())
        file_preset = file_values.pop('preset', None)
        preset = preset or file_preset
    return build_run_config(preset or 'full', kernel_size, file_values, _flag_values(args))


def choose_lambda(args, y, recorded_sigma: Optional[float] = None) -> Tuple[float, str, float, str]:
    """(lambda, lambda_source, sigma, sigma_source).

    --lambda wins; otherwise lambda = 0.1*sigma with sigma from --sigma, then the
    pair's recorded value, then the wavelet estimate.
    """
    sigma_arg = getattr(args, 'sigma', 'auto')
    if isinstance(sigma_arg, float):
        sigma, sigma_source = sigma_arg, 'user'
    elif recorded_sigma is not None:
        sigma, sigma_source = float(recorded_sigma), 'recorded'
    else:
        sigma, sigma_source = estimate_sigma(y), 'estimated'
    if getattr(args, 'lam', None) is not None:
        return float(args.lam), 'user', sigma, sigma_source
    return lambda_from_sigma(sigma), f"sigma_{sigma_source}", sigma, sigma_source


class DeblurConfig:
    """Configuration manager for the deblurring tool."""

    def __init__(self, config_file: Optional[str] = None):
        self.config_file = Path(config_file or DEFAULT_CONFIG_FILE)
        self.config: Dict[str, Any] = {}

    def init_from_preset(self, preset: str = 'desk', kernel_size: int = 31):
        """Write a full configuration seeded from a preset."""
        print("=" * 60)
        print("Zero-shot Blind Deconvolution - Configuration Setup")
        print("=" * 60)
        cfg = preset_config(preset, kernel_size)
        self.config = cfg.to_dict()
        self.config['preset'] = preset
        self.save_config()
        print(f"\nPreset '{preset}' written with kernel size {kernel_size}")
        print("\nTo deblur with this configuration, use:")
        print(f"python deblur_cli.py deblur --config {self.config_file} --input <image> --out-dir <dir>")

    def save_config(self):
        with open(self.config_file, 'w', encoding='utf-8') as f:
            json.dump(self.config, f, indent=2, default=str)
        print(f"\nConfiguration saved to: {self.config_file.absolute()}")

    def load_config(self) -> Dict[str, Any]:
        """Load the JSON file; malformed files raise ConfigurationError."""
        if not self.config_file.exists():
            raise ConfigurationError(f"configuration file not found: {self.config_file}")
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                self.config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{self.config_file}:{e.lineno}: invalid JSON ({e.msg})")
        if not isinstance(self.config, dict):
            raise ConfigurationError(f"{self.config_file}: top level must be an object")
        return self.config

    def run_config(self, kernel_size: Optional[int] = None,
                   flag_values: Optional[Dict[str, Any]] = None) -> RunConfig:
        values = dict(self.config)
        preset = values.pop('preset', 'full')
        return build_run_config(preset, kernel_size, values, flag_values)

    def test_config(self) -> bool:
        """Validate the loaded configuration by building a RunConfig from it."""
        print("\n" + "=" * 40)
        print("Validating Configuration")
        print("=" * 40)
        try:
            cfg = self.run_config()
        except ConfigurationError as e:
            print(f"❌ Invalid configuration: {e}")
            return False
        print(f"✅ Configuration valid - {cfg.mode} mode, T={cfg.iterations}, K={cfg.kernel_size}")
        return True

    def display_current_config(self):
        if not self.config:
            print("No configuration loaded.")
            return

        print("\nCurrent Configuration:")
        print("-" * 40)
        print(f"Preset: {self.config.get('preset', 'full')}")
        print(f"Mode: {self.config.get('mode', 'Not set')}")
        print(f"Iterations: {self.config.get('iterations', 'Not set')}")
        print(f"Learning rate: {self.config.get('lr0', 'Not set')} "
              f"(milestones {self.config.get('milestones', 'Not set')})")
        print(f"Lambda: {self.config.get('lam', 'Not set')}")
        print(f"Seed: {self.config.get('seed', 'Not set')}")
        gx = self.config.get('gx', {})
        gk = self.config.get('gk', {})
        print(f"G_x levels: {gx.get('levels', 'Not set')}, channels {gx.get('channels_down', 'Not set')}")
        print(f"G_k variant: {gk.get('depth_variant', 'Not set')}, kernel size {gk.get('kernel_size', 'Not set')}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        print("Zero-shot Blind Deconvolution - Configuration Tool")
        print("\nUsage:")
        print("  python config_setup.py init [full|desk] [kernel_size] [file]  - Write a preset configuration")
        print("  python config_setup.py test [file]                             - Validate a configuration")
        print("  python config_setup.py show [file]                             - Show a configuration")
        return 0

    command = argv[0].lower()
    try:
        if command == 'init':
            preset = argv[1] if len(argv) > 1 else 'desk'
            kernel_size = int(argv[2]) if len(argv) > 2 else 31
            DeblurConfig(argv[3] if len(argv) > 3 else None).init_from_preset(preset, kernel_size)
            return 0
        if command in ('test', 'show'):
            manager = DeblurConfig(argv[1] if len(argv) > 1 else None)
            manager.load_config()
            if command == 'show':
                manager.display_current_config()
                return 0
            return 0 if manager.test_config() else 1
    except (ConfigurationError, ValueError) as e:
        print(f"❌ {e}")
        return 2

    print("Unknown command. Use: init, test, or show")
    return 2


if __name__ == "__main__":
    sys.exit(main())
