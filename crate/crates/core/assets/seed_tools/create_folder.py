from base_action import BaseAction
import os


class create_folder(BaseAction):
    # Creates a folder, including missing parents.
    def __init__(self):
        self._description = "Create a folder under the given working directory."

    def __call__(self, working_directory=None, folder_name=None, *args, **kwargs):
        # working_directory: base directory, defaults to the current one
        # folder_name: relative name of the folder to create
        if not folder_name:
            raise ValueError("folder_name is required")
        base = working_directory or os.getcwd()
        path = os.path.join(base, folder_name)
        os.makedirs(path, exist_ok=True)
        return path
