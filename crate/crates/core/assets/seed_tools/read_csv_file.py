from base_action import BaseAction
import csv
import os


class read_csv_file(BaseAction):
    # Reads a CSV file into a list of row dictionaries keyed by the header.
    def __init__(self):
        self._description = "Read the rows of a CSV file as a list of records."

    def __call__(self, file_path=None, *args, **kwargs):
        # file_path: path of the CSV file, first row is the header
        if not file_path:
            raise ValueError("file_path is required")
        with open(os.path.expanduser(file_path), encoding="utf-8", newline="") as fh:
            return list(csv.DictReader(fh))
