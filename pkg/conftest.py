# Puts the repository root on sys.path so `import amopt` works without installation.
