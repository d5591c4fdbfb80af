from base_action import BaseAction
import os


class read_text_file(BaseAction):
    # Reads a UTF-8 text file and returns its contents.
    def __init__(self):
        self._description = "Read the text content of a file."

    def __call__(self, file_path=None, *args, **kwargs):
        # file_path: path of the text file, relative to the working directory or absolute
        if not file_path:
            raise ValueError("file_path is required")
        with open(os.path.expanduser(file_path), encoding="utf-8") as fh:
            return fh.read()
