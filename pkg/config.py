# config.py
import os

from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL = os.getenv("FBSDE_LOG_LEVEL", "INFO").upper()
LOG_DIR = os.getenv("FBSDE_LOG_DIR", "logs")
RUN_ACCEPTANCE = os.getenv("FBSDE_RUN_ACCEPTANCE", "0") == "1"

PRESET_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "presets")
