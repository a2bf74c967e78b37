from celery import Celery

app = Celery("termharness", include=["termharness.tasks"])
app.conf.update(
    task_serializer="json",
    result_serializer="json",
    accept_content=["json"],
    task_acks_late=True,
    worker_prefetch_multiplier=1,
)


def configure(pool_settings):
    app.conf.update(
        broker_url=pool_settings.broker_url, result_backend=pool_settings.result_backend
    )
