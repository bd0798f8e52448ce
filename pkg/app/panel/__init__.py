# panel package
