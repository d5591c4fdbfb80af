# Loads a tool class from a source file, evaluates one invocation statement
# against it and reports the outcome on stdout using the result marker.
#
#   python3 driver.py <tool_source.py> <invocation.txt>
import json
import sys
import types

MARKER = "##FRIDAY_RESULT##"


class BaseAction:
    def __init__(self, *args, **kwargs):
        self._description = ""

    @property
    def description(self):
        return self._description

    def __call__(self, *args, **kwargs):
        raise NotImplementedError


_base = types.ModuleType("base_action")
_base.BaseAction = BaseAction
sys.modules["base_action"] = _base


def _emit(result, error):
    sys.stdout.flush()
    try:
        line = json.dumps({"result": result, "error": error}, default=str)
    except (TypeError, ValueError) as exc:
        line = json.dumps({"result": None, "error": "unserializable result: %s" % exc})
    sys.stdout.write(MARKER + "\n" + line + "\n")
    sys.stdout.flush()


def main():
    source_path, invocation_path = sys.argv[1], sys.argv[2]
    with open(source_path, encoding="utf-8") as fh:
        source = fh.read()
    with open(invocation_path, encoding="utf-8") as fh:
        invocation = fh.read().strip()
    # A syntax error in the tool is an interpreter-level failure: let the
    # traceback reach stderr and exit nonzero.
    code = compile(source, source_path, "exec")
    namespace = {"__name__": "__tool__", "BaseAction": BaseAction}
    try:
        exec(code, namespace)
        try:
            call = compile(invocation, "<invocation>", "eval")
        except SyntaxError:
            # Statement form, e.g. `result = Tool()(x)`.
            exec(compile(invocation, "<invocation>", "exec"), namespace)
            result = namespace.get("result")
        else:
            result = eval(call, namespace)
        error = None
    except BaseException as exc:  # noqa: B902 - tools must never crash the driver
        if isinstance(exc, KeyboardInterrupt):
            raise
        result, error = None, "%s: %s" % (type(exc).__name__, exc)
    _emit(result, error)


if __name__ == "__main__":
    main()
