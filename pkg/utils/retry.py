from typing import Callable, Any, Tuple, Type
from functools import wraps

from tafe.errors import GeometryRetryError


def retry_on(
    exceptions: Tuple[Type[BaseException], ...],
    max_attempts: int = 10
):
    """Re-invoke the wrapped callable while it raises one of `exceptions`.

    No backoff: callers are deterministic CPU work that draws fresh random
    state on every attempt.
    """
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            last_exception = None

            for attempt in range(max_attempts):
                try:
                    return func(*args, **kwargs)
                except exceptions as e:
                    last_exception = e

            raise GeometryRetryError(
                f"{func.__name__} failed after {max_attempts} attempts: {last_exception}"
            ) from last_exception

        return wrapper
    return decorator
