ESTIMATOR_EXACT = "exact-discrete"
ESTIMATOR_DV = "dv-neural"
ESTIMATOR_DV_DIFFERENCE = "dv-neural-difference"
ESTIMATOR_GAUSSIAN = "gaussian-closed-form"

METHOD_ERM = "erm"
METHOD_GROUP_DRO = "group_dro"
METHOD_NOISE = "noise"
METHOD_REGULARIZER = "regularizer"

ALTERNATE_EPOCH = "epoch"
ALTERNATE_STEP = "step"

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_NUMERICAL_ERROR = 2

MIN_DV_BATCH = 8
CRITIC_CLIP = 30.0
DIVERGENCE_LIMIT_NATS = 50.0

REPORT_FORMATS = ("text", "csv", "json")

ENV_SEED = "COBIAS_SEED"
ENV_JOBS = "COBIAS_JOBS"
