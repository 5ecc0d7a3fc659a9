# Shared schemas package
