from .celery import app


@app.task
def execute_rollout(instance, group_index, settings, mode, seed=None):
    from .config import Config
    from .gateway import make_gateway
    from .orchestrator import TaskInstance, run_rollout

    config = Config.model_validate(settings)
    llm = make_gateway(config.gateway, seed=seed)
    record = run_rollout(TaskInstance.from_dict(instance), group_index, config, llm, mode)
    return record.to_dict()
