from sosd.cli import entry

entry()
