# simlab package
