#!/usr/bin/env python3
"""
Setup checker for the spin-wave memory simulator
"""

import sys
import importlib

CORE_DEPS = [
    ("numpy", "Arrays and random streams"),
    ("scipy", "Special functions, quadrature, root finding, distributions"),
    ("pydantic", "Configuration schema and JSON summaries"),
    ("click", "Command line"),
    ("tqdm", "Batch progress"),
]

DEV_DEPS = [
    ("pytest", "Test runner"),
]

PROJECT_MODULES = [
    ("model_core", "Config, profiles, errors"),
    ("write_dynamics", "Write-stage growth"),
    ("eit_retrieval", "EIT retrieval solver"),
    ("detection_chain", "Detector model"),
    ("trial_sampler", "Monte Carlo trials"),
    ("count_statistics", "Estimators"),
    ("exact_oracle", "Exact distributions"),
    ("calibration", "Parameter calibration"),
]


def check_import(module_name, description="", echo=print):
    """Check if a module can be imported"""
    try:
        importlib.import_module(module_name)
        echo(f"✅ {module_name} - {description}")
        return True
    except ImportError as e:
        echo(f"❌ {module_name} - {description} (Error: {e})")
        return False


def main(echo=print):
    echo("🔍 Spin-wave memory simulator - Setup Check")
    echo("=" * 50)

    echo("📦 Core Dependencies:")
    core_ok = all([check_import(module, desc, echo) for module, desc in CORE_DEPS])

    echo("\n📦 Development Dependencies:")
    for module, desc in DEV_DEPS:
        check_import(module, desc, echo)

    echo("\n🔧 Project Modules:")
    modules_ok = all([check_import(module, desc, echo) for module, desc in PROJECT_MODULES])

    echo("\n" + "=" * 50)

    if core_ok and modules_ok:
        echo("🎉 Setup looks good!")
        echo("💡 Run: python cli.py figure2a --out-dir out/")
    else:
        echo("⚠️  Some dependencies are missing.")
        echo("💡 Run: pip install -r requirements.txt")

    return core_ok and modules_ok


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
