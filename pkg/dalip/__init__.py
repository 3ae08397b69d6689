# This file exists, so that the folder it is in is recognized by python