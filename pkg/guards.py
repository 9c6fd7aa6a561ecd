# guards.py

from functools import wraps
import inspect

from errors import GridError, TemplateMismatch


def _bound(f, args, kwargs):
    bound = inspect.signature(f).bind_partial(*args, **kwargs)
    return bound.arguments


def requires_velocity_grid(f):
    @wraps(f)
    def decorated_function(*args, **kwargs):
        grid = _bound(f, args, kwargs).get("grid")
        if grid is None or not grid.has_velocities:
            raise GridError(f"{f.__name__} needs a velocity grid")
        return f(*args, **kwargs)
    return decorated_function


def requires_position_grid(f):
    @wraps(f)
    def decorated_function(*args, **kwargs):
        grid = _bound(f, args, kwargs).get("grid")
        if grid is not None and grid.has_velocities:
            raise GridError(f"{f.__name__} works on position-only grids; use the Klein-Kramers generator")
        return f(*args, **kwargs)
    return decorated_function


def requires_template(*templates):
    def decorator(f):
        @wraps(f)
        def decorated_function(*args, **kwargs):
            rx = _bound(f, args, kwargs).get("rx")
            if rx is None or rx.template not in templates:
                got = getattr(rx, "template", None)
                raise TemplateMismatch(f"{f.__name__} expects {'/'.join(templates)}, got {got}")
            return f(*args, **kwargs)
        return decorated_function
    return decorator


def requires_kind(kind):
    def decorator(f):
        @wraps(f)
        def decorated_function(*args, **kwargs):
            ex = _bound(f, args, kwargs).get("ex")
            if ex is None or ex.kind != kind:
                got = getattr(ex, "kind", None)
                raise TemplateMismatch(f"{f.__name__} expects a {kind} exchange model, got {got}")
            return f(*args, **kwargs)
        return decorated_function
    return decorator
