#!/usr/bin/env python3
"""
test_env_vars.py
Environment settings read by config.py.
"""

import importlib
import os
import sys

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

import config


def _reloaded(monkeypatch, **env):
    for name in ("FBSDE_LOG_LEVEL", "FBSDE_LOG_DIR", "FBSDE_RUN_ACCEPTANCE"):
        monkeypatch.delenv(name, raising=False)
    for name, value in env.items():
        monkeypatch.setenv(name, value)
    return importlib.reload(config)


def test_environment_settings(monkeypatch):
    print("🧪 Testing environment settings")
    try:
        settings = _reloaded(monkeypatch, FBSDE_LOG_LEVEL="debug", FBSDE_LOG_DIR="/tmp/fbsde-logs",
                             FBSDE_RUN_ACCEPTANCE="1")
        assert settings.LOG_LEVEL == "DEBUG"
        assert settings.LOG_DIR == "/tmp/fbsde-logs"
        assert settings.RUN_ACCEPTANCE is True
        assert os.path.isdir(settings.PRESET_DIR)

        settings = _reloaded(monkeypatch, FBSDE_RUN_ACCEPTANCE="yes")
        assert settings.RUN_ACCEPTANCE is False
    finally:
        monkeypatch.undo()
        importlib.reload(config)
