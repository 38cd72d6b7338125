"""Runtime defaults. Environment variables override the ambient settings."""
import os

# --- AMBIENT SETTINGS (env driven) ---
LOG_LEVEL = os.environ.get('SRFM_LOG_LEVEL', 'INFO').upper()
JOBS = int(os.environ.get('SRFM_JOBS', '1'))
CONDITIONS_DIR = os.environ.get('SRFM_CONDITIONS_DIR') or os.path.join(
    os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'conditions')
RESULTS_DIR = os.environ.get('SRFM_RESULTS_DIR') or 'results'
RUN_SLOW = os.environ.get('SRFM_RUN_SLOW', '0').lower() in ('1', 'true', 'yes')

SCHEMA_VERSION = 1

# --- MPLE / IRLS ---
IRLS_MAX_ITER = 100
IRLS_GRAD_TOL = 1e-8
IRLS_MAX_HALVINGS = 30
DRIFT_BOUND = 30.0

# --- CLASSIFICATION EM ---
CEM_N_STARTS = 20
CEM_MAX_ITER = 200
CEM_TOL = 1e-6
CEM_EMPTY_CLASS_RETRIES = 3

# --- MC-MLE ---
MCMLE_SAMPLES = 2000
MCMLE_ESS_FRACTION = 1.0 / 20.0
MCMLE_MAX_NODES = 300
MCMLE_MAX_ITER = 50

# --- SAMPLER ---
BURN_IN_FACTOR = 20
THIN_FACTOR = 1

# --- STUDY ---
STUDY_REPLICATIONS = 20
STUDY_N_NODES = 151
CLASS_PROPORTIONS = (0.75, 0.25)
