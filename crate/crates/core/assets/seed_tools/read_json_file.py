from base_action import BaseAction
import json
import os


class read_json_file(BaseAction):
    # Parses a JSON file and returns the decoded value.
    def __init__(self):
        self._description = "Read and parse the content of a JSON file."

    def __call__(self, file_path=None, *args, **kwargs):
        # file_path: path of the JSON file
        if not file_path:
            raise ValueError("file_path is required")
        with open(os.path.expanduser(file_path), encoding="utf-8") as fh:
            return json.load(fh)
