# utils/constants.py
import logging
import os
import sys

# --- User-specific Application Data Directory ---
APP_NAME = "FedPlaceSim"


def get_app_data_dir():
    """Returns the appropriate user-specific data directory for the OS."""
    if sys.platform == "win32":
        return os.path.join(os.environ.get('APPDATA', os.path.expanduser("~")), APP_NAME)
    elif sys.platform == "darwin":
        return os.path.join(os.path.expanduser("~"), "Library", "Application Support", APP_NAME)
    else:
        return os.path.join(os.path.expanduser("~"), ".config", APP_NAME)


APP_USER_DATA_DIR = get_app_data_dir()
DEFAULT_CONFIG_FILE = "config.ini"

# --- Result status values (ExperimentResult.status) ---
STATUS_SUCCESS = "SUCCESS"
STATUS_EMPTY = "EMPTY"
STATUS_ERROR = "ERROR"

# --- CLI exit codes ---
EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_ERROR = 2

# --- Metrics record types ---
RECORD_RUN_CONFIG = "run_config"
RECORD_ROUND = "round"
RECORD_EVAL = "eval"
RECORD_RUN_RESULT = "run_result"

# --- Run modes ---
MODE_CENTRALIZED = "centralized"
MODE_FEDERATED = "federated"
MODE_HIERARCHICAL = "hierarchical"

# --- Partition record splits ---
SPLIT_TRAIN = "train"
SPLIT_VAL = "val"

# --- Output file names ---
METRICS_FILE_TEMPLATE = "metrics_seed{seed}.jsonl"
CHECKPOINT_DIR_NAME = "checkpoints"
FINAL_CHECKPOINT_TEMPLATE = "seed{seed}_final.pvec"
BEST_CHECKPOINT_TEMPLATE = "seed{seed}_best.pvec"
SUMMARY_FILE_NAME = "summary.json"
LOG_FILE_NAME = "fedplacesim.log"

# --- Logging Configuration ---
LOG_LEVEL_DEBUG = logging.DEBUG
LOG_LEVEL_INFO = logging.INFO
ACTIVE_LOG_LEVEL = LOG_LEVEL_INFO  # Or LOG_LEVEL_DEBUG for per-iteration traces
LOG_FORMAT = '%(asctime)s %(levelname)-8s [%(threadName)s] [%(filename)s:%(lineno)d] %(funcName)s - %(message)s'
COLOR_LOG_FORMAT = '%(log_color)s%(asctime)s %(levelname)-8s%(reset)s [%(threadName)s] %(name)s - %(message)s'
LOG_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
