# Core modules: settings, errors, file I/O
