from logging import DEBUG
from helpers import LogHelper

log_helper = LogHelper()

# Create loggers for each module.
# It is possible to dynamically create them all in a for loop
# but then IDEs won't be able to provide autocompletion or linting
weakground_logger = log_helper.create_logger(
    log_helper.TimedRotatingFileAndStreamHandler(
        logger_name="WeakGround", log_file="weakground/WeakGround.log"
    )
)

scene_logger = log_helper.create_logger(
    log_helper.TimedRotatingFileAndStreamHandler(
        logger_name="Scene", log_file="scene/Scene.log"
    )
)

projection_logger = log_helper.create_logger(
    log_helper.TimedRotatingFileAndStreamHandler(
        logger_name="Projection", log_file="projection/Projection.log"
    )
)

encoder_logger = log_helper.create_logger(
    log_helper.TimedRotatingFileAndStreamHandler(
        logger_name="Encoder", log_file="encoder/Encoder.log"
    )
)

training_logger = log_helper.create_logger(
    log_helper.TimedRotatingFileAndStreamHandler(
        logger_name="Training", log_file="training/Training.log"
    )
)

inference_logger = log_helper.create_logger(
    log_helper.TimedRotatingFileAndStreamHandler(
        logger_name="Inference", log_file="inference/Inference.log"
    )
)

evaluation_logger = log_helper.create_logger(
    log_helper.TimedRotatingFileAndStreamHandler(
        logger_name="Evaluation", log_file="evaluation/Evaluation.log"
    )
)

registry_logger = log_helper.create_logger(
    log_helper.TimedRotatingFileAndStreamHandler(
        logger_name="Registry", log_file="registry/Registry.log"
    )
)

timer_logger = log_helper.create_logger(
    log_helper.TimedRotatingFileAndStreamHandler(
        logger_name="Timer", log_file="timer/Timer.log", file_log_level=DEBUG
    )
)
